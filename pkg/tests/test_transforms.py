"""Correlation-Cholesky transform: bijection, Jacobian identity, implied
correlation-matrix law, and the backward pass."""

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import quad

from covergp.priors import lkj_chol_logpdf
from covergp.transforms import (
    corr_chol_backward,
    corr_chol_forward,
    corr_chol_logdet_terms,
    corr_free_size,
)


def _fd_jacobian_logdet(y, J, h=1e-6):
    """log |det dL/dy| by finite differences over the strict lower triangle."""
    m = corr_free_size(J)
    Jac = np.zeros((m, m))
    rows = [(j, k) for j in range(1, J) for k in range(j)]
    for c in range(m):
        yp = y.copy()
        yp[c] += h
        ym = y.copy()
        ym[c] -= h
        Lp, _ = corr_chol_forward(yp, J)
        Lm, _ = corr_chol_forward(ym, J)
        for r, (j, k) in enumerate(rows):
            Jac[r, c] = (Lp[j, k] - Lm[j, k]) / (2 * h)
    sign, logdet = np.linalg.slogdet(Jac)
    assert sign > 0
    return logdet


class TestForward:
    def test_unit_rows_and_positive_diag(self):
        rng = np.random.default_rng(0)
        for J in [2, 3, 5]:
            y = rng.normal(size=corr_free_size(J))
            L, W = corr_chol_forward(y, J)
            np.testing.assert_allclose((L * L).sum(axis=1), 1.0, atol=1e-12)
            assert np.all(np.diag(L) > 0)
            C = L @ L.T
            np.testing.assert_allclose(np.diag(C), 1.0, atol=1e-12)
            assert np.all(np.linalg.eigvalsh(C) > 0)

    def test_zero_maps_to_identity(self):
        L, _ = corr_chol_forward(np.zeros(3), 3)
        np.testing.assert_allclose(L, np.eye(3), atol=1e-15)

    def test_round_trip_via_partial_correlations(self):
        rng = np.random.default_rng(1)
        y = rng.normal(size=corr_free_size(4))
        L, W = corr_chol_forward(y, 4)
        # reconstruct w from L row by row and invert tanh
        for j in range(1, 4):
            rem = 1.0
            for k in range(j):
                w = L[j, k] / np.sqrt(rem)
                assert np.arctanh(w) == pytest.approx(y[j * (j - 1) // 2 + k], rel=1e-10)
                rem *= 1 - w * w


class TestDensityInUnconstrainedSpace:
    def test_value_equals_prior_plus_jacobian(self):
        """unconstrained density = constrained density + log|Jacobian|."""
        rng = np.random.default_rng(2)
        for J in [2, 3, 4]:
            for _ in range(5):
                y = rng.normal(size=corr_free_size(J)) * 0.8
                L, W = corr_chol_forward(y, J)
                val, _ = corr_chol_logdet_terms(W, J, eta=1.0)
                expected = lkj_chol_logpdf(L, eta=1.0) + _fd_jacobian_logdet(y, J)
                assert val == pytest.approx(expected, rel=1e-5, abs=1e-6)

    def test_value_with_nonunit_shape(self):
        rng = np.random.default_rng(3)
        J = 3
        y = rng.normal(size=3) * 0.5
        L, W = corr_chol_forward(y, J)
        val, _ = corr_chol_logdet_terms(W, J, eta=2.5)
        expected = lkj_chol_logpdf(L, eta=2.5) + _fd_jacobian_logdet(y, J)
        assert val == pytest.approx(expected, rel=1e-5)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(4)
        J = 4
        y = rng.normal(size=corr_free_size(J)) * 0.7
        _, W = corr_chol_forward(y, J)
        _, grad = corr_chol_logdet_terms(W, J, eta=1.0)
        for c in range(y.size):
            def f(v, c=c):
                yy = y.copy()
                yy[c] = v
                _, Wv = corr_chol_forward(yy, J)
                return corr_chol_logdet_terms(Wv, J, eta=1.0)[0]

            h = 1e-6
            fd = (f(y[c] + h) - f(y[c] - h)) / (2 * h)
            assert grad[c] == pytest.approx(fd, rel=1e-6, abs=1e-8)


class TestImpliedLaw:
    """Sampling y from the transformed density must reproduce the target
    correlation-matrix distribution (jointly uniform at unit shape)."""

    @staticmethod
    def _sample_correlations(J, n_draws, seed):
        """Draws from the unit-shape law via independent scaled-Beta
        canonical partial correlations: the combined density in y is
        prod (1-w^2)^c with c = (J-k)/2 at unit shape (0-indexed column k);
        transporting by dy/dw = 1/(1-w^2) gives w with density
        (1-w^2)^(c-1), i.e. w ~ 2 Beta(c, c) - 1."""
        rng = np.random.default_rng(seed)
        rows = [(j, k) for j in range(1, J) for k in range(j)]
        out = []
        for _ in range(n_draws):
            y = np.empty(len(rows))
            for r, (j, k) in enumerate(rows):
                c = 0.5 * (J - k)
                w = 2.0 * rng.beta(c, c) - 1.0
                y[r] = np.arctanh(np.clip(w, -1 + 1e-12, 1 - 1e-12))
            L, _ = corr_chol_forward(y, J)
            out.append(L @ L.T)
        return np.asarray(out)

    def test_j2_marginal_uniform(self):
        C = self._sample_correlations(2, 20000, seed=5)
        rho = C[:, 1, 0]
        stat = stats.kstest(rho, stats.uniform(loc=-1, scale=2).cdf)
        assert stat.pvalue > 0.01

    def test_j3_marginals_follow_joint_uniform_law(self):
        # jointly uniform correlation matrices have Beta(3/2, 3/2) marginals
        # on (-1, 1) for J = 3 -- not uniform marginals
        C = self._sample_correlations(3, 20000, seed=6)
        for (a, b) in [(1, 0), (2, 0), (2, 1)]:
            rho = C[:, a, b]
            stat = stats.kstest((rho + 1) / 2, stats.beta(1.5, 1.5).cdf)
            assert stat.pvalue > 0.01, (a, b, stat.pvalue)

    def test_density_in_w_factorizes_as_assumed(self):
        """The combined unconstrained density, transported to w, must match
        the independent scaled-Beta factors used by the sampler above."""
        J, k = 4, 1
        c = 0.5 * (J - k)

        def w_density(w):
            # from corr_chol_logdet_terms: coefficient (J - k)/2 on
            # log(1-w^2), plus the 1/(1-w^2) from dy/dw
            return (1 - w * w) ** (c - 1.0)

        norm, _ = quad(w_density, -1, 1)
        beta_pdf = stats.beta(c, c).pdf
        for w in [-0.8, -0.2, 0.3, 0.9]:
            assert w_density(w) / norm == pytest.approx(beta_pdf((w + 1) / 2) / 2, rel=1e-9)


class TestBackward:
    def test_lbar_to_ybar_matches_fd(self):
        rng = np.random.default_rng(7)
        for J in [2, 3, 5]:
            y = rng.normal(size=corr_free_size(J)) * 0.6
            L, W = corr_chol_forward(y, J)
            Lbar = np.tril(rng.standard_normal((J, J)))
            ybar = corr_chol_backward(Lbar, L, W, J)
            h = 1e-6
            for c in range(y.size):
                yp = y.copy()
                yp[c] += h
                ym = y.copy()
                ym[c] -= h
                Lp, _ = corr_chol_forward(yp, J)
                Lm, _ = corr_chol_forward(ym, J)
                fd = float((Lbar * (Lp - Lm)).sum()) / (2 * h)
                assert ybar[c] == pytest.approx(fd, rel=1e-6, abs=1e-9)
