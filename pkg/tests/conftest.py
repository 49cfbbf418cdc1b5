"""Shared fixtures and builders for the test suite."""

import numpy as np
import pytest

from covergp.data import Dataset
from covergp.model import ModelSpec, ParameterPacker, Posterior
from covergp.observation import GroupStructure, sample_y, softmax_alpha


def make_groups_j3():
    """Three species: one exclusive pair plus one singleton."""
    return GroupStructure(groups=((0, 1), (2,)), resolutions=(50, 100))


def random_dataset(spec_groups, n, seed, extent=60.0, beta=None, gamma=None):
    """Synthetic dataset drawn from a constant-latent truth (enough to give
    every model family valid counts to fit)."""
    rng = np.random.default_rng(seed)
    locs = rng.uniform(0, extent, (n, 2))
    J = spec_groups.n_species
    beta = np.asarray(beta if beta is not None else rng.normal(size=J))
    counts = np.zeros((n, J), dtype=np.int64)
    N = np.repeat(np.asarray(spec_groups.resolutions)[None, :], n, axis=0)
    for g, members in enumerate(spec_groups.groups):
        gam = gamma[g] if gamma is not None else 3.0
        alpha = softmax_alpha(beta[list(members)])
        for i in range(n):
            counts[i, list(members)] = sample_y(int(N[i, g]), alpha, gam, rng)
    return Dataset(locs=locs, counts=counts, groups=spec_groups, N=N)


def random_theta(spec, n, seed, scale=0.5):
    """A dispersed but numerically safe random state for gradient checks."""
    rng = np.random.default_rng(seed)
    packer = ParameterPacker(spec, n)
    theta = scale * rng.standard_normal(packer.dim)
    # keep positive-scale blocks in a well-conditioned range
    for name, _ in packer.blocks:
        if name.startswith("log_ell") or name.startswith("log_ell_field"):
            theta[packer.slices[name]] = np.log(rng.uniform(3.0, 40.0))
        elif name.startswith("mu_logl"):
            theta[packer.slices[name]] = np.log(rng.uniform(5.0, 30.0))
        elif name.startswith("log_var_field"):
            theta[packer.slices[name]] = np.log(rng.uniform(0.2, 1.5))
    return theta


@pytest.fixture
def groups_j3():
    return make_groups_j3()


@pytest.fixture
def dataset_j3(groups_j3):
    return random_dataset(groups_j3, n=8, seed=42)
