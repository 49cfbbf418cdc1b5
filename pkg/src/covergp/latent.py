"""Whitened construction of the species-specific latent processes.

Every latent structure is expressed as a deterministic push-forward of
standard-normal sampler coordinates z (a non-centered parameterization):

* constant:         f[j, i] = beta[j]
* independent GPs:  eps[j]  = omega[j] * L_kernel[j] z[j]
* coregionalized:   eps     = diag(omega) L_corr W,   W[j] = L_kernel[kappa(j)] z[j]

where L_kernel are Cholesky factors of unit-variance kernel matrices and
L_corr the Cholesky factor of the interspecific correlation matrix.  With
z ~ N(0, I) the implied prior on the stacked latents is
N(0, sum_j B_j kron K_{kappa(j)}) with B_j the outer product of the j-th
column of chol(diag(omega) Corr diag(omega)) -- the linear model of
coregionalization.  The joint Jn x Jn covariance is never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class CoregionalizationSpec:
    """Interspecific covariance parameters: standard deviations, the
    correlation Cholesky factor, and the number of distinct kernels."""

    omega: np.ndarray        # (J,) positive
    corr_chol: np.ndarray    # (J, J) lower, unit-norm rows
    k_distinct: int

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        L = np.asarray(self.corr_chol, dtype=float)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "corr_chol", L)
        J = omega.size
        if np.any(omega <= 0):
            raise ValidationError("omega entries must be positive")
        if L.shape != (J, J):
            raise ValidationError(f"corr_chol shape {L.shape} does not match omega size {J}")
        if not (1 <= self.k_distinct <= J):
            raise ValidationError(f"k_distinct must be in 1..{J}, got {self.k_distinct}")

    @property
    def n_species(self):
        return self.omega.size

    def covariance(self):
        """The implied coregionalization covariance diag(omega) Corr diag(omega)."""
        Lsig = self.omega[:, None] * self.corr_chol
        return Lsig @ Lsig.T


def species_kernel_map(J, k_distinct, override=None):
    """Species -> distinct-kernel assignment.

    Default rule: species j keeps its own kernel while j < k_distinct and
    shares the last distinct kernel otherwise.  An explicit override tuple
    may reassign species to kernels arbitrarily.
    """
    if override is not None:
        m = tuple(int(v) for v in override)
        if len(m) != J or any(not 0 <= v < k_distinct for v in m):
            raise ValidationError(
                f"kernel map must assign each of {J} species a kernel in 0..{k_distinct - 1}"
            )
        if set(m) != set(range(k_distinct)):
            raise ValidationError("every distinct kernel must be used by some species")
        return m
    return tuple(min(j, k_distinct - 1) for j in range(J))


def constant_latent(beta, n):
    """Constant niche preference: f[j, i] = beta[j], zero spatial term."""
    beta = np.asarray(beta, dtype=float)
    if not np.all(np.isfinite(beta)):
        raise ValidationError("beta must be finite")
    return np.repeat(beta[:, None], n, axis=1)


def igp_latent(z, beta, chols):
    """Independent per-species GPs: eps[j] = chols[j] @ z[j].

    z is (J, n); chols is a sequence of J lower Cholesky factors carrying
    both kernel shape and magnitude.  Returns f = beta[:, None] + eps.
    """
    z = np.asarray(z, dtype=float)
    beta = np.asarray(beta, dtype=float)
    J, n = z.shape
    if len(chols) != J:
        raise ValidationError(f"need {J} Cholesky factors, got {len(chols)}")
    eps = np.empty((J, n))
    for j in range(J):
        if chols[j].shape != (n, n):
            raise ValidationError("Cholesky factor dimension mismatch")
        eps[j] = chols[j] @ z[j]
    return beta[:, None] + eps


def lmc_latent(z, beta, coreg, chols, kernel_map=None):
    """Coregionalized latents from whitened coordinates.

    z : (J, n) standard-normal coordinates, one row per species
    coreg : CoregionalizationSpec
    chols : k_distinct lower Cholesky factors of unit-variance kernels
    kernel_map : optional species -> kernel override

    Returns f = beta[:, None] + diag(omega) L_corr W with W[j] the
    unit-variance field of species j.
    """
    z = np.asarray(z, dtype=float)
    beta = np.asarray(beta, dtype=float)
    J, n = z.shape
    if coreg.n_species != J:
        raise ValidationError("coregionalization dimension mismatch")
    if len(chols) != coreg.k_distinct:
        raise ValidationError(f"need {coreg.k_distinct} kernel factors, got {len(chols)}")
    kmap = species_kernel_map(J, coreg.k_distinct, kernel_map)
    W = np.empty((J, n))
    for j in range(J):
        W[j] = chols[kmap[j]] @ z[j]
    eps = (coreg.omega[:, None]) * (coreg.corr_chol @ W)
    return beta[:, None] + eps


def realize_lengthscale_field(z_l, mu_logl, chol_field):
    """Per-location length scales from whitened coordinates:
    log ell = mu + L z, ell = exp(log ell) > 0 by construction."""
    logl = mu_logl + chol_field @ np.asarray(z_l, dtype=float)
    return np.exp(logl)
