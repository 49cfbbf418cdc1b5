"""Model assembly: dimensions, packing, log posterior, and the
finite-difference gradient gate over every configuration."""

import numpy as np
import pytest
from scipy.integrate import dblquad

from covergp.data import Dataset
from covergp.errors import ValidationError
from covergp.model import (
    ModelSpec,
    ParameterPacker,
    Posterior,
    dimension,
    grad_log_posterior,
    log_posterior,
    table_model_names,
)
from covergp.observation import GroupStructure, softmax_alpha
from covergp.priors import PriorConfig, gamma_logpdf, student_t_logpdf

from conftest import make_groups_j3, random_dataset, random_theta


class TestModelSpec:
    def test_names_round_trip(self, groups_j3):
        for name in table_model_names():
            spec = ModelSpec.from_name(name, groups_j3)
            assert spec.name() == name

    def test_rejects_bad_names(self, groups_j3):
        for bad in ["C-S-BB", "LMC-DM", "IGP-BB", "LMC0-S-DM", "X-S-DM"]:
            with pytest.raises(ValidationError):
                ModelSpec.from_name(bad, groups_j3)

    def test_lmc_needs_two_species(self):
        solo = GroupStructure(groups=((0,),), resolutions=(10,))
        with pytest.raises(ValidationError):
            ModelSpec.from_name("LMC1-S-DM", solo)

    def test_obs_groups_bb_vs_dm(self, groups_j3):
        dm = ModelSpec.from_name("C-DM", groups_j3)
        bb = ModelSpec.from_name("C-BB", groups_j3)
        assert dm.obs_groups.n_groups == 2
        assert bb.obs_groups.n_groups == 3
        assert bb.obs_groups.resolutions == (50, 50, 100)

    def test_kernel_counts(self, groups_j3):
        assert ModelSpec.from_name("IGP-S-DM", groups_j3).k_distinct == 3
        assert ModelSpec.from_name("LMC1-S-DM", groups_j3).k_distinct == 1
        assert ModelSpec.from_name("LMC2-S-DM", groups_j3).kmap() == (0, 1, 1)


class TestDimension:
    def test_constant_dm(self):
        groups = GroupStructure(groups=((0, 1),), resolutions=(30,))
        spec = ModelSpec.from_name("C-DM", groups)
        assert dimension(spec, 7) == 2 + 1

    def test_igp_s_bb_single_species(self):
        groups = GroupStructure(groups=((0,),), resolutions=(30,))
        spec = ModelSpec.from_name("IGP-S-BB", groups)
        # beta + log gamma + log omega + log ell + 10 z
        assert dimension(spec, 10) == 1 + 1 + 1 + 1 + 10

    def test_lmc1_s_dm_block_audit(self):
        groups = GroupStructure(groups=((0, 1, 2),), resolutions=(30,))
        spec = ModelSpec.from_name("LMC1-S-DM", groups)
        # 3 beta + 1 log gamma + 3 log omega + 3 corr + 1 kernel + 15 z
        assert dimension(spec, 5) == 26

    def test_nonstationary_blocks(self):
        groups = make_groups_j3()
        spec = ModelSpec.from_name("LMC2-NS-DM", groups)
        n = 8
        # 3 beta + 2 log gamma + 3 log omega + 3 corr + 2*(mu, ell_f, var_f)
        # + 24 z + 16 zl
        assert dimension(spec, n) == 3 + 2 + 3 + 3 + 6 + 24 + 16

    def test_pack_unpack_bit_identical(self, groups_j3):
        rng = np.random.default_rng(0)
        for name in table_model_names():
            spec = ModelSpec.from_name(name, groups_j3)
            packer = ParameterPacker(spec, 6)
            theta = rng.standard_normal(packer.dim)
            views = [packer.view(theta, bname) for bname, _ in packer.blocks]
            rebuilt = np.concatenate(views)
            assert np.array_equal(rebuilt, theta)
            assert len(packer.column_names()) == packer.dim
            assert len(set(packer.column_names())) == packer.dim


class TestLogPosterior:
    def test_scalar_hand_computation(self):
        """Single plot, single species, constant latent, y=0, N=1: the
        likelihood is log(1 - alpha(beta)) and priors add up by hand."""
        groups = GroupStructure(groups=((0,),), resolutions=(1,))
        ds = Dataset(
            locs=np.array([[0.0, 0.0]]),
            counts=np.array([[0]]),
            groups=groups,
            N=np.array([[1]]),
        )
        spec = ModelSpec.from_name("C-BB", groups)
        post = Posterior(spec, ds)
        beta, u_gamma = 0.4, np.log(2.0)
        theta = np.array([beta, u_gamma])
        alpha = softmax_alpha([beta])[0]
        pr = PriorConfig()
        # one-trial beta-binomial: P(y=0) = 1 - alpha regardless of gamma
        expected = (
            np.log(1 - alpha)
            + student_t_logpdf(beta, 0.0, pr.beta_scale, pr.beta_df)
            + gamma_logpdf(2.0, pr.gamma_shape, pr.gamma_rate)
            + u_gamma
        )
        assert post.logp(theta) == pytest.approx(float(expected), rel=1e-12)

    def test_module_level_wrappers(self, groups_j3, dataset_j3):
        spec = ModelSpec.from_name("C-DM", groups_j3)
        theta = random_theta(spec, dataset_j3.n_plots, seed=1)
        post = Posterior(spec, dataset_j3)
        assert log_posterior(theta, dataset_j3, spec) == post.logp(theta)
        np.testing.assert_array_equal(
            grad_log_posterior(theta, dataset_j3, spec), post.logp_grad(theta)[1]
        )

    def test_deterministic(self, groups_j3, dataset_j3):
        spec = ModelSpec.from_name("LMC1-S-DM", groups_j3)
        post = Posterior(spec, dataset_j3)
        theta = random_theta(spec, dataset_j3.n_plots, seed=2)
        a = post.logp(theta)
        b = post.logp(theta)
        assert a == b
        ga = post.logp_grad(theta)
        gb = post.logp_grad(theta)
        assert ga[0] == gb[0]
        np.testing.assert_array_equal(ga[1], gb[1])

    def test_nonfinite_state_rejected(self, groups_j3, dataset_j3):
        spec = ModelSpec.from_name("IGP-S-DM", groups_j3)
        post = Posterior(spec, dataset_j3)
        theta = random_theta(spec, dataset_j3.n_plots, seed=3)
        before = post.n_rejected
        theta[0] = 800.0  # exp overflow in gamma? no: beta huge -> alpha ~ 1, fine
        theta[post.packer.slices["log_gamma"]] = 900.0  # gamma = exp(900) overflows
        assert post.logp(theta) == -np.inf
        lp, grad = post.logp_grad(theta)
        assert lp == -np.inf
        np.testing.assert_array_equal(grad, np.zeros(post.dim))
        assert post.n_rejected >= before + 2

    def test_group_factorization(self, groups_j3):
        """Zeroing one group's counts changes only that group's terms."""
        ds = random_dataset(groups_j3, n=6, seed=7)
        spec = ModelSpec.from_name("C-DM", groups_j3)
        theta = random_theta(spec, 6, seed=8)
        post = Posterior(spec, ds)

        counts2 = ds.counts.copy()
        counts2[:, [0, 1]] = 0  # clear group 0
        ds2 = Dataset(locs=ds.locs, counts=counts2, groups=groups_j3, N=ds.N)
        post2 = Posterior(spec, ds2)

        # group-1 contribution: difference must equal the change in group-0
        # terms alone, computed from single-group datasets
        solo1 = GroupStructure(groups=((0, 1),), resolutions=(50,))
        dsA = Dataset(locs=ds.locs, counts=ds.counts[:, :2], groups=solo1, N=ds.N[:, :1])
        dsB = Dataset(locs=ds.locs, counts=counts2[:, :2], groups=solo1, N=ds.N[:, :1])
        specA = ModelSpec.from_name("C-DM", solo1)
        thA = np.concatenate([theta[:2], theta[3:4]])
        change_full = post.loglik(theta) - post2.loglik(theta)
        change_solo = Posterior(specA, dsA).loglik(thA) - Posterior(specA, dsB).loglik(thA)
        assert change_full == pytest.approx(change_solo, rel=1e-12)

    def test_absent_species_leaves_other_groups_unchanged(self, groups_j3):
        """Appending a species (own group) with zero counts and a deeply
        negative intercept leaves the existing likelihood terms unchanged."""
        ds = random_dataset(groups_j3, n=5, seed=9)
        spec = ModelSpec.from_name("C-DM", groups_j3)
        theta = random_theta(spec, 5, seed=10)
        base = Posterior(spec, ds).loglik(theta)

        groups4 = GroupStructure(groups=((0, 1), (2,), (3,)), resolutions=(50, 100, 20))
        counts4 = np.concatenate([ds.counts, np.zeros((5, 1), dtype=np.int64)], axis=1)
        N4 = np.concatenate([ds.N, np.full((5, 1), 20, dtype=np.int64)], axis=1)
        ds4 = Dataset(locs=ds.locs, counts=counts4, groups=groups4, N=N4)
        spec4 = ModelSpec.from_name("C-DM", groups4)
        theta4 = np.concatenate([theta[:3], [-40.0], theta[3:5], [np.log(2.0)]])
        lik4 = Posterior(spec4, ds4).loglik(theta4)
        # extra group with alpha ~ 0 and y = 0 contributes ~ log(1) = 0
        assert lik4 == pytest.approx(base, abs=1e-10)

    def test_quadrature_oracle_constant_dm(self):
        """Tiny C+DM joint posterior mass against 2-D quadrature of the
        unmarginalized model (beta integrated over a grid, covers over the
        simplex are already integrated analytically in the pmf; here we
        check the *posterior normalizer ratio* between two datasets)."""
        groups = GroupStructure(groups=((0,),), resolutions=(3,))
        locsA = np.array([[0.0, 0.0], [1.0, 0.0]])
        dsA = Dataset(locs=locsA, counts=np.array([[1], [2]]), groups=groups, N=np.full((2, 1), 3))
        dsB = Dataset(locs=locsA, counts=np.array([[0], [0]]), groups=groups, N=np.full((2, 1), 3))
        spec = ModelSpec.from_name("C-DM", groups)
        postA, postB = Posterior(spec, dsA), Posterior(spec, dsB)

        def joint(beta, u_gamma, post):
            return np.exp(post.logp(np.array([beta, u_gamma])))

        zA, _ = dblquad(joint, -8, 8, -6, 6, args=(postA,), epsabs=1e-10)
        zB, _ = dblquad(joint, -8, 8, -6, 6, args=(postB,), epsabs=1e-10)

        # oracle: same ratio from direct summation of the marginal likelihood
        from covergp.observation import dirmult_logpmf
        from covergp.priors import PriorConfig

        pr = PriorConfig()

        def marglik(post, y1, y2):
            def f(beta, u_gamma):
                gamma = np.exp(u_gamma)
                alpha = softmax_alpha([beta])
                ll = dirmult_logpmf([y1], 3, alpha, gamma) + dirmult_logpmf([y2], 3, alpha, gamma)
                lp = (
                    student_t_logpdf(beta, 0, pr.beta_scale, pr.beta_df)
                    + gamma_logpdf(gamma, pr.gamma_shape, pr.gamma_rate)
                    + u_gamma
                )
                return np.exp(ll + lp)

            val, _ = dblquad(f, -8, 8, -6, 6, epsabs=1e-10)
            return val

        assert zA / zB == pytest.approx(marglik(postA, 1, 2) / marglik(postB, 0, 0), rel=1e-8)


def _fd_check(post, theta, rtol, n_dirs=None, steps=(1e-5, 1e-4)):
    """Central-difference gradient check; per coordinate the better of two
    step sizes is used, since a single h cannot serve both large-curvature
    and tiny-gradient coordinates at double precision."""
    lp, grad = post.logp_grad(theta)
    assert np.isfinite(lp)
    dims = range(post.dim) if n_dirs is None else np.random.default_rng(0).choice(
        post.dim, size=min(n_dirs, post.dim), replace=False
    )
    worst = 0.0
    for d in dims:
        errs = []
        for h in steps:
            e = np.zeros(post.dim)
            step = h * (1.0 + abs(theta[d]))
            e[d] = step
            fd = (post.logp(theta + e) - post.logp(theta - e)) / (2 * step)
            denom = max(abs(fd), abs(grad[d]), 1e-8)
            errs.append(abs(grad[d] - fd) / denom)
        worst = max(worst, min(errs))
    assert worst < rtol, f"worst relative gradient error {worst:.2e}"
    return worst


class TestGradients:
    @pytest.mark.parametrize("name", table_model_names())
    def test_fd_gradient_every_configuration(self, name, groups_j3):
        ds = random_dataset(groups_j3, n=8, seed=11)
        spec = ModelSpec.from_name(name, groups_j3)
        post = Posterior(spec, ds)
        for seed in range(3):
            theta = random_theta(spec, 8, seed=100 + seed)
            _fd_check(post, theta, rtol=1e-5)

    def test_directional_derivative(self, groups_j3):
        ds = random_dataset(groups_j3, n=8, seed=12)
        spec = ModelSpec.from_name("LMC1-S-DM", groups_j3)
        post = Posterior(spec, ds)
        theta = random_theta(spec, 8, seed=13)
        rng = np.random.default_rng(14)
        v = rng.standard_normal(post.dim)
        v /= np.linalg.norm(v)
        _, grad = post.logp_grad(theta)
        h = 1e-5
        fd = (post.logp(theta + h * v) - post.logp(theta - h * v)) / (2 * h)
        assert float(grad @ v) == pytest.approx(fd, rel=1e-6)

    def test_decoupled_latents_give_pure_prior_gradient(self, groups_j3):
        """With the latent magnitude driven to zero the z-block gradient is
        exactly the whitened prior: -z."""
        ds = random_dataset(groups_j3, n=6, seed=15)
        spec = ModelSpec.from_name("IGP-S-DM", groups_j3)
        post = Posterior(spec, ds)
        theta = random_theta(spec, 6, seed=16)
        theta[post.packer.slices["log_omega"]] = -600.0  # omega ~ 1e-261
        _, grad = post.logp_grad(theta)
        z = theta[post.packer.slices["z"]]
        np.testing.assert_allclose(grad[post.packer.slices["z"]], -z, atol=1e-200)
