"""The competition layer: group structure, softmax expected covers,
Dirichlet-Multinomial observation likelihood, and generative sampling.

Counts in a mutually exclusive group g live on the discrete simplex
``sum_j y[i,j] <= N[i,g]`` with the remainder assigned to an explicit
"empty" class.  Marginalizing the Dirichlet cover process against the
Multinomial observation gives the closed-form Dirichlet-Multinomial pmf
used as the likelihood; the continuous covers are recovered afterwards by
conjugacy when cover-scale output is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .errors import ValidationError


@dataclass(frozen=True)
class GroupStructure:
    """Partition of species into mutually exclusive groups.

    groups      : tuple of tuples of species indices (0-based, disjoint,
                  together covering 0..J-1)
    resolutions : default measurement resolution N per group (one count
                  equals 1/N of the plot area)
    """

    groups: tuple
    resolutions: tuple

    def __post_init__(self):
        groups = tuple(tuple(int(j) for j in g) for g in self.groups)
        res = tuple(int(N) for N in self.resolutions)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "resolutions", res)
        if len(groups) != len(res):
            raise ValidationError("one resolution per group required")
        if any(len(g) == 0 for g in groups):
            raise ValidationError("groups must be nonempty")
        if any(N < 1 for N in res):
            raise ValidationError("resolutions must be >= 1")
        flat = [j for g in groups for j in g]
        if len(set(flat)) != len(flat):
            raise ValidationError("groups must be disjoint")
        if sorted(flat) != list(range(len(flat))):
            raise ValidationError("species indices must cover 0..J-1 exactly")

    @property
    def n_species(self):
        return sum(len(g) for g in self.groups)

    @property
    def n_groups(self):
        return len(self.groups)

    def group_of(self, j):
        for g, members in enumerate(self.groups):
            if j in members:
                return g
        raise ValidationError(f"species {j} not in any group")

    def singletonized(self):
        """The independent-species view: every species its own group,
        inheriting the resolution of its declared group."""
        J = self.n_species
        return GroupStructure(
            groups=tuple((j,) for j in range(J)),
            resolutions=tuple(self.resolutions[self.group_of(j)] for j in range(J)),
        )

    def to_dict(self):
        return {"groups": [list(g) for g in self.groups], "resolutions": list(self.resolutions)}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"groups", "resolutions"}
        if unknown:
            raise ValidationError(f"unknown group keys: {sorted(unknown)}")
        return cls(groups=tuple(tuple(g) for g in d["groups"]), resolutions=tuple(d["resolutions"]))


def softmax_alpha(f_group):
    """Expected covers for one group at one plot, including the empty class.

    f_group holds the latent values of the group's species; the empty class
    has implicit latent 0.  Overflow is guarded by subtracting the max of
    the augmented vector.
    """
    f = np.asarray(f_group, dtype=float)
    if not np.all(np.isfinite(f)):
        raise ValidationError("latent values must be finite")
    aug = np.concatenate([f, [0.0]])
    aug -= aug.max()
    e = np.exp(aug)
    return e / e.sum()


def softmax_alpha_rows(F):
    """Row-wise softmax with an appended zero column: F is (n, q) latent
    values, the result is (n, q+1) expected covers summing to one."""
    F = np.asarray(F, dtype=float)
    aug = np.concatenate([F, np.zeros((F.shape[0], 1))], axis=1)
    aug -= aug.max(axis=1, keepdims=True)
    e = np.exp(aug)
    return e / e.sum(axis=1, keepdims=True)


def _validate_counts(y, N):
    y = np.asarray(y)
    if np.any(y < 0) or y.sum() > N:
        raise ValidationError(f"counts {y} invalid for resolution N={N}")
    return y.astype(np.int64)


def dirmult_logpmf(y, N, alpha, gamma):
    """Log pmf of observed counts for one group at one plot.

    ``y`` are the species counts (without the empty class), ``alpha`` the
    expected covers *including* the empty class as last entry, ``gamma``
    the process concentration.  The Dirichlet cover layer is integrated
    out analytically:

        N! / (prod_c y_c!) * G(gamma)/G(N+gamma)
           * prod_c G(y_c + alpha_c gamma) / G(alpha_c gamma)

    with c running over species and the empty class.
    """
    if gamma <= 0:
        raise ValidationError(f"gamma must be positive, got {gamma}")
    y = _validate_counts(y, N)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.size != y.size + 1:
        raise ValidationError("alpha must include the empty class")
    y_aug = np.concatenate([y, [N - y.sum()]])
    a = alpha * gamma
    coef = gammaln(N + 1.0) - gammaln(y_aug + 1.0).sum()
    return float(
        coef + gammaln(gamma) - gammaln(N + gamma) + (gammaln(y_aug + a) - gammaln(a)).sum()
    )


def dirmult_logpmf_rows(Y_aug, N, Alpha, gamma, log_coef=None):
    """Vectorized Dirichlet-Multinomial log pmf over plots.

    Y_aug : (n, q+1) integer counts including the empty class
    N     : (n,) resolutions
    Alpha : (n, q+1) expected covers including the empty class
    gamma : scalar concentration
    log_coef : optional precomputed multinomial coefficients (theta-free)
    """
    if log_coef is None:
        log_coef = gammaln(N + 1.0) - gammaln(Y_aug + 1.0).sum(axis=1)
    a = Alpha * gamma
    return log_coef + gammaln(gamma) - gammaln(N + gamma) + (gammaln(Y_aug + a) - gammaln(a)).sum(axis=1)


def dirmult_loglik_and_grad_f(Y_aug, N, F_group, gamma, log_coef=None):
    """Likelihood of one group over all plots plus gradients.

    Fuses the softmax and the Dirichlet-Multinomial pmf so the backward
    pass reuses the forward intermediates.

    Returns (loglik_total, dF, dgamma) where dF is (n, q) w.r.t. the
    latent values and dgamma the scalar derivative w.r.t. gamma.
    """
    Alpha = softmax_alpha_rows(F_group)
    ll = dirmult_logpmf_rows(Y_aug, N, Alpha, gamma, log_coef=log_coef)
    a = Alpha * gamma
    psi_diff = digamma(Y_aug + a) - digamma(a)  # exactly 0 where Y_aug == 0
    g = gamma * psi_diff
    inner = (Alpha * g).sum(axis=1, keepdims=True)
    dAll = Alpha * (g - inner)          # w.r.t. augmented latents (empty incl.)
    dF = dAll[:, :-1]                   # empty-class latent is pinned at 0
    dgamma = float(
        (digamma(gamma) - digamma(N + gamma)).sum() + (Alpha * psi_diff).sum()
    )
    return float(ll.sum()), dF, dgamma


def betabinom_logpmf(y, N, alpha, gamma):
    """Beta-Binomial log pmf: the singleton-group special case, provided as
    an optimized scalar/vector path.  ``alpha`` is the single expected
    cover (no empty class)."""
    if gamma <= 0:
        raise ValidationError(f"gamma must be positive, got {gamma}")
    y = np.asarray(y)
    N = np.asarray(N)
    if np.any(y < 0) or np.any(y > N):
        raise ValidationError("counts outside 0..N")
    a = alpha * gamma
    b = (1.0 - alpha) * gamma
    out = (
        gammaln(N + 1.0)
        - gammaln(y + 1.0)
        - gammaln(N - y + 1.0)
        + gammaln(gamma)
        - gammaln(N + gamma)
        + gammaln(y + a)
        - gammaln(a)
        + gammaln(N - y + b)
        - gammaln(b)
    )
    return float(out) if out.ndim == 0 else out


def competition_corr(alpha_j, alpha_k):
    """Correlation between the covers of two species sharing a group:
    -sqrt(a a' / ((1-a)(1-a'))).  Independent of the concentration."""
    a = np.asarray(alpha_j, dtype=float)
    b = np.asarray(alpha_k, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0) or np.any(a + b >= 1):
        raise ValidationError("expected covers must lie inside the open simplex")
    out = -np.sqrt(a * b / ((1.0 - a) * (1.0 - b)))
    return float(out) if out.ndim == 0 else out


def sample_phi_posterior(y, N, alpha, gamma, rng):
    """One draw of the cover simplex given counts: Dirichlet(alpha*gamma + y_aug).

    Conjugate recovery of the integrated-out cover layer; the posterior
    mean is (alpha*gamma + y_aug) / (gamma + N).
    """
    y = _validate_counts(y, N)
    y_aug = np.concatenate([y, [N - y.sum()]])
    return rng.dirichlet(np.asarray(alpha) * gamma + y_aug)


def sample_y(N, alpha, gamma, rng):
    """Generative draw of group counts: phi ~ Dirichlet(alpha*gamma), then
    counts ~ Multinomial(N, phi).  Returns species counts without the empty
    class."""
    if gamma <= 0:
        raise ValidationError(f"gamma must be positive, got {gamma}")
    if N == 0:
        return np.zeros(len(alpha) - 1, dtype=np.int64)
    phi = rng.dirichlet(np.asarray(alpha, dtype=float) * gamma)
    counts = rng.multinomial(N, phi)
    return counts[:-1].astype(np.int64)
