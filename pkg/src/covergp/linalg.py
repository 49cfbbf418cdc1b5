"""Dense linear-algebra helpers for the covariance layer.

Contains the jitter-escalating Cholesky used everywhere a covariance matrix
is factorized, and reverse-mode differentiation through the Cholesky
decomposition (blocked level-3 scheme of Murray, "Differentiation of the
Cholesky decomposition", arXiv:1602.07527).
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .errors import NumericalError

# Relative jitter added to the diagonal before factorizing, and the number
# of x10 escalations attempted before giving up (1e-8 ... 1e-4 x mean diag).
DEFAULT_JITTER = 1e-8
MAX_JITTER_ESCALATIONS = 4


def jittered_cholesky(K, jitter=DEFAULT_JITTER, escalate=True, context=""):
    """Lower Cholesky factor of ``K + jitter*mean(diag(K))*I``.

    Parameters
    ----------
    K : (n, n) array
        Symmetric positive (semi-)definite matrix.  Only the lower triangle
        is referenced.
    jitter : float
        Relative jitter; the absolute diagonal boost is ``jitter * mean(diag)``.
    escalate : bool
        If True, retry with x10 jitter up to MAX_JITTER_ESCALATIONS times.
        If False a single failure raises immediately (used inside samplers,
        where the caller rejects the state instead of changing the target).
    context : str
        Free-form tag included in the error message.

    Returns
    -------
    L : (n, n) array, lower triangular
    jitter_abs : float, absolute value added to the diagonal
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"expected square matrix, got shape {K.shape}")
    scale = float(np.mean(np.diag(K)))
    if not np.isfinite(scale) or scale < 0:
        raise NumericalError(f"covariance diagonal invalid (mean={scale}) {context}")
    if scale == 0.0:
        scale = 1.0
    tries = 1 + (MAX_JITTER_ESCALATIONS if escalate else 0)
    jit = jitter
    for _ in range(tries):
        boosted = K + (jit * scale) * np.eye(K.shape[0])
        try:
            L = cholesky(boosted, lower=True, check_finite=False)
            return L, jit * scale
        except np.linalg.LinAlgError:
            jit *= 10.0
        except ValueError as exc:  # non-finite entries
            raise NumericalError(f"non-finite covariance entries {context}") from exc
    raise NumericalError(
        f"Cholesky failed after jitter escalation to {jit / 10.0:.1e} (relative) {context}"
    )


def _phi(A):
    """Lower triangle of A with the diagonal halved."""
    out = np.tril(A)
    np.fill_diagonal(out, 0.5 * np.diag(out))
    return out


def _chol_rev_unblocked(L, Lbar):
    """Symbolic reverse-mode rule for a single diagonal block.

    Returns Phi(inv(L).T (P + P.T) inv(L)) with P = Phi(L.T Lbar); the halved
    diagonal of the outer Phi is part of the formula, not a convention.
    """
    P = _phi(L.T @ Lbar)
    S = P + P.T
    tmp = solve_triangular(L, S, lower=True, trans="T", check_finite=False)
    tmp = solve_triangular(L, tmp.T, lower=True, trans="T", check_finite=False)
    return _phi(tmp)


def chol_rev(L, Lbar, block=64):
    """Backpropagate sensitivities through ``L = chol(Sigma)``.

    Given ``Lbar[i,j] = df/dL[i,j]`` for a scalar function f of the lower
    factor, returns the lower-triangular ``Sbar`` with the convention

    * ``Sbar[i,j]`` (i > j) is df/dSigma[i,j] where the symmetric pair
      (Sigma[i,j], Sigma[j,i]) moves together as one variable,
    * ``Sbar[i,i]`` is df/dSigma[i,i].

    Blocked level-3 algorithm: cost is dominated by triangular solves and
    matrix products, matching the cost profile of the factorization itself.
    """
    n = L.shape[0]
    Abar = np.tril(Lbar).astype(float, copy=True)
    for k in range(n, 0, -block):
        j = max(0, k - block)
        R, D, B, C = L[j:k, :j], L[j:k, j:k], L[k:, :j], L[k:, j:k]
        Rbar = Abar[j:k, :j]
        Dbar = Abar[j:k, j:k]
        Bbar = Abar[k:, :j]
        Cbar = Abar[k:, j:k]
        if Cbar.shape[0]:
            Cbar[:] = solve_triangular(D, Cbar.T, lower=True, trans="T", check_finite=False).T
            Bbar -= Cbar @ R
            Dbar -= np.tril(Cbar.T @ C)
        Dbar[:] = _chol_rev_unblocked(D, Dbar)
        Rbar -= (Cbar.T @ B) + (Dbar + Dbar.T) @ R
    return np.tril(Abar)


def symmetrize_pair_sensitivity(Sbar):
    """Expand a tril pair-sensitivity matrix to the full symmetric matrix G
    with ``G[i,j] = G[j,i]`` = sensitivity of the unordered pair (i, j) and
    ``G[i,i]`` = sensitivity of the diagonal entry."""
    G = Sbar + Sbar.T
    np.fill_diagonal(G, np.diag(Sbar))
    return G
