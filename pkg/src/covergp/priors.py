"""Prior log densities, their derivatives, and the default hyperparameters.

All densities are written on the constrained scale; the model layer adds
the log-Jacobians of its unconstrained parameterizations.  Normalization
constants are kept exactly everywhere except the LKJ density, which is
evaluated up to its (shape- and dimension-dependent) constant.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, replace

import numpy as np
from scipy.special import gammaln

from .errors import ValidationError

LOG2 = np.log(2.0)
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class PriorConfig:
    """Hyperparameters of every prior family used by the models.

    Scales are standard deviations unless the name says variance.  The
    length-scale priors are on the *inverse* length scale (half Student-t),
    which puts more weight on long ranges.
    """

    beta_scale: float = 2.5
    beta_df: float = 4.0
    gamma_shape: float = 1.5
    gamma_rate: float = 2.0 / 3.0
    omega_scale: float = 4.0
    omega_df: float = 4.0
    lkj_shape: float = 1.0
    inv_ell_scale: float = 0.19
    inv_ell_df: float = 5.0
    mu_logl_loc: float = 4.5
    mu_logl_var: float = 2.0
    field_inv_ell_scale: float = 2.0
    field_inv_ell_df: float = 4.0
    field_var_scale: float = 1.0
    field_var_df: float = 4.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name == "lkj_shape":
                if value < 1.0:
                    raise ValidationError(f"lkj_shape must be >= 1, got {value}")
            elif value <= 0:
                raise ValidationError(f"prior hyperparameter {name} must be > 0, got {value}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown prior keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def with_overrides(self, **kw):
        return replace(self, **kw)


def student_t_logpdf(x, mu, scale, df):
    """Location-scale Student-t log density."""
    if scale <= 0 or df <= 0:
        raise ValidationError(f"scale and df must be positive, got {scale}, {df}")
    z = (np.asarray(x, dtype=float) - mu) / scale
    return (
        gammaln((df + 1.0) / 2.0)
        - gammaln(df / 2.0)
        - 0.5 * np.log(df * np.pi)
        - np.log(scale)
        - 0.5 * (df + 1.0) * np.log1p(z * z / df)
    )


def student_t_dlogpdf(x, mu, scale, df):
    """d/dx of the Student-t log density."""
    d = np.asarray(x, dtype=float) - mu
    return -(df + 1.0) * d / (df * scale * scale + d * d)


def half_student_t_logpdf(x, scale, df):
    """Half Student-t (location 0) log density on x > 0."""
    x = np.asarray(x, dtype=float)
    out = np.where(x >= 0, LOG2 + student_t_logpdf(x, 0.0, scale, df), -np.inf)
    return out if out.ndim else float(out)


def half_student_t_dlogpdf(x, scale, df):
    return student_t_dlogpdf(x, 0.0, scale, df)


def inv_half_student_t_logpdf(x, scale, df):
    """Log density of x when 1/x has a half Student-t distribution.

    This is the "half-inverse" prior used for length scales: the change of
    variables u = 1/x contributes the Jacobian 1/x^2.
    """
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.where(
            x > 0,
            half_student_t_logpdf(np.where(x > 0, 1.0 / x, 1.0), scale, df)
            - 2.0 * np.log(np.where(x > 0, x, 1.0)),
            -np.inf,
        )
    return out if out.ndim else float(out)


def inv_half_student_t_dlogpdf(x, scale, df):
    inv = 1.0 / x
    return -half_student_t_dlogpdf(inv, scale, df) * inv * inv - 2.0 / x


def gamma_logpdf(x, shape, rate):
    """Gamma log density with shape/rate parameterization."""
    if shape <= 0 or rate <= 0:
        raise ValidationError(f"shape and rate must be positive, got {shape}, {rate}")
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.where(
            x > 0,
            shape * np.log(rate)
            - gammaln(shape)
            + (shape - 1.0) * np.log(np.where(x > 0, x, 1.0))
            - rate * x,
            -np.inf,
        )
    return out if out.ndim else float(out)


def gamma_dlogpdf(x, shape, rate):
    return (shape - 1.0) / x - rate


def normal_logpdf(x, mu, var):
    z2 = (np.asarray(x, dtype=float) - mu) ** 2 / var
    return -0.5 * (z2 + np.log(var) + LOG_2PI)


def normal_dlogpdf(x, mu, var):
    return -(np.asarray(x, dtype=float) - mu) / var


def std_normal_logpdf_sum(z):
    """Sum of iid standard normal log densities (constant kept)."""
    z = np.asarray(z, dtype=float)
    return -0.5 * float(z.ravel() @ z.ravel()) - 0.5 * z.size * LOG_2PI


def lkj_chol_logpdf(L, eta=1.0):
    """LKJ log density of a correlation-matrix Cholesky factor, up to the
    normalizing constant:  sum_{j>=2} (J - j + 2 eta - 2) log L[j,j]
    (1-indexed rows).
    """
    L = np.asarray(L, dtype=float)
    J = L.shape[0]
    if L.ndim != 2 or L.shape[1] != J:
        raise ValidationError(f"expected square factor, got {L.shape}")
    if not np.allclose(np.triu(L, 1), 0.0):
        raise ValidationError("factor is not lower triangular")
    row_norms = np.sqrt((L * L).sum(axis=1))
    if not np.allclose(row_norms, 1.0, atol=1e-8):
        raise ValidationError("rows of a correlation Cholesky factor must have unit norm")
    if J == 1:
        return 0.0
    j = np.arange(2, J + 1, dtype=float)
    diag = np.diag(L)[1:]
    if np.any(diag <= 0):
        raise ValidationError("correlation Cholesky factor needs a positive diagonal")
    return float(((J - j + 2.0 * eta - 2.0) * np.log(diag)).sum())
