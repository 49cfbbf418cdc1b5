"""Spatial covariance functions and covariance-matrix assembly.

Two kernel families are used by the latent layer:

* stationary exponential,  k(s, s') = sigma2 * exp(-||s - s'|| / ell)
* non-stationary Matern 3/2 with a spatially varying length scale
  (Paciorek-style construction restricted to isotropic 2-D inputs):

      k(s_i, s_j) = pref_ij * (1 + sqrt(3 Q_ij)) * exp(-sqrt(3 Q_ij))

  with Sigma_i = ell_i^2 I_2,
  Q_ij   = ||s_i - s_j||^2 / m_ij,    m_ij = (ell_i^2 + ell_j^2) / 2,
  pref_ij = |Sigma_i|^{1/4} |Sigma_j|^{1/4} |(Sigma_i+Sigma_j)/2|^{-1/2}
          = ell_i * ell_j / m_ij.

The non-stationary kernel has unit marginal variance; magnitude enters
through the coregionalization weights, never through the kernel itself.
Setting ell_i = ell_j = ell recovers the stationary Matern 3/2.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .linalg import DEFAULT_JITTER, jittered_cholesky

SQRT3 = np.sqrt(3.0)


def _check_locations(s):
    s = np.atleast_2d(np.asarray(s, dtype=float))
    if s.shape[-1] != 2:
        raise ValidationError(f"locations must have 2 coordinates, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValidationError("non-finite location coordinates")
    return s


def pairwise_sq_dists(locs, other=None):
    """Matrix of squared Euclidean distances between rows of two point sets."""
    a = _check_locations(locs)
    b = a if other is None else _check_locations(other)
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return np.maximum(d2, 0.0)


def exp_cov(s, s2, length_scale, variance=1.0):
    """Stationary exponential covariance between two locations (or arrays).

    Returns ``variance * exp(-||s - s2|| / length_scale)``.
    """
    if not (np.isscalar(length_scale) and length_scale > 0):
        raise ValidationError(f"length_scale must be positive, got {length_scale!r}")
    if variance < 0:
        raise ValidationError(f"variance must be >= 0, got {variance!r}")
    a = _check_locations(s)
    b = _check_locations(s2)
    d = np.sqrt(((a - b) ** 2).sum(axis=-1))
    out = variance * np.exp(-d / length_scale)
    return float(out[0]) if out.size == 1 else out


def matern32_nonstat_cov(s, s2, ell_i, ell_j):
    """Non-stationary Matern 3/2 covariance between two locations.

    ``ell_i`` and ``ell_j`` are the length scales attached to ``s`` and
    ``s2``.  Unit marginal variance: the value is 1 when the locations and
    length scales coincide.
    """
    if ell_i <= 0 or ell_j <= 0:
        raise ValidationError(f"length scales must be positive, got {ell_i!r}, {ell_j!r}")
    a = _check_locations(s)
    b = _check_locations(s2)
    d2 = ((a - b) ** 2).sum(axis=-1)
    m = 0.5 * (ell_i**2 + ell_j**2)
    q = d2 / m
    t = np.sqrt(3.0 * q)
    pref = (ell_i * ell_j) / m
    out = pref * (1.0 + t) * np.exp(-t)
    return float(out[0]) if out.size == 1 else out


def exp_cov_matrix(d, length_scale, variance=1.0):
    """Elementwise stationary exponential kernel on a distance matrix ``d``."""
    return variance * np.exp(-d / length_scale)


def matern32_nonstat_matrix(d2, ell, ell2=None):
    """Non-stationary Matern 3/2 kernel matrix.

    Parameters
    ----------
    d2 : (n, m) array of squared distances
    ell : (n,) per-location length scales for the rows
    ell2 : (m,) per-location length scales for the columns; defaults to ell
    """
    a = np.asarray(ell, dtype=float)
    b = a if ell2 is None else np.asarray(ell2, dtype=float)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValidationError("non-positive length scale in field")
    m = 0.5 * (a[:, None] ** 2 + b[None, :] ** 2)
    q = d2 / m
    t = np.sqrt(3.0 * q)
    pref = (a[:, None] * b[None, :]) / m
    return pref * (1.0 + t) * np.exp(-t)


def matern32_nonstat_matrix_grad(d2, ell, K=None):
    """Partial derivatives dK[i,j]/d ell[i] of the square non-stationary
    Matern matrix, as an (n, n) array (the derivative w.r.t. the row-slot
    length scale; by symmetry dK[i,j]/d ell[j] is the transpose entry).
    """
    a = np.asarray(ell, dtype=float)
    m = 0.5 * (a[:, None] ** 2 + a[None, :] ** 2)
    q = d2 / m
    t = np.sqrt(3.0 * q)
    e = np.exp(-t)
    pref = (a[:, None] * a[None, :]) / m
    h = (1.0 + t) * e
    aa = a[:, None]
    # d pref / d a = pref * (1/a - a/m);  dh/dQ = -1.5 e^{-t};  dQ/da = -Q a / m
    return pref * (h * (1.0 / aa - aa / m) + 1.5 * e * q * aa / m)


def build_cov_matrix(locs, kernel, jitter=DEFAULT_JITTER):
    """Assemble a dense covariance matrix from a kernel closure and verify
    positive definiteness.

    Parameters
    ----------
    locs : (n, 2) array of locations
    kernel : callable ``kernel(s_i, s_j) -> float``
    jitter : relative diagonal jitter (escalated x10 up to 4 times)

    Returns
    -------
    K : (n, n) array including the jitter on the diagonal
    L : lower Cholesky factor of K
    """
    locs = _check_locations(locs)
    n = locs.shape[0]
    if n < 1:
        raise ValidationError("need at least one location")
    K = np.empty((n, n))
    for i in range(n):
        K[i, i] = kernel(locs[i], locs[i])
        for j in range(i):
            K[i, j] = K[j, i] = kernel(locs[i], locs[j])
    L, jit = jittered_cholesky(K, jitter=jitter, context=f"(n={n} assembled matrix)")
    K = K + jit * np.eye(n)
    return K, L
