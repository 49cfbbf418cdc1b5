"""Joint unnormalized log posterior of every model configuration, with its
exact gradient, and the packing between the flat unconstrained sampler
vector and named model quantities.

Model naming follows the configuration grid: latent structure C (constant),
IGP (independent GPs), or LMCk (coregionalized with k distinct kernels);
kernel S (stationary exponential) or NS (non-stationary Matern 3/2 with a
log-GP length-scale field); observation BB (every species alone in its
group) or DM (declared exclusive groups).  Example name: "LMC1-NS-DM".

Gradients are propagated by hand through every layer, including the
Cholesky factorizations of parameter-dependent covariance matrices
(reverse-mode Cholesky identities in :mod:`covergp.linalg`), so one
evaluation of value+gradient costs O(k n^3) like the forward pass.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .kernels import (
    exp_cov_matrix,
    matern32_nonstat_matrix,
    matern32_nonstat_matrix_grad,
    pairwise_sq_dists,
)
from .latent import species_kernel_map
from .linalg import DEFAULT_JITTER, chol_rev, jittered_cholesky, symmetrize_pair_sensitivity
from scipy.special import gammaln

from .observation import (
    GroupStructure,
    dirmult_loglik_and_grad_f,
    dirmult_logpmf_rows,
    softmax_alpha_rows,
)
from .priors import (
    PriorConfig,
    gamma_dlogpdf,
    gamma_logpdf,
    half_student_t_dlogpdf,
    half_student_t_logpdf,
    inv_half_student_t_dlogpdf,
    inv_half_student_t_logpdf,
    normal_dlogpdf,
    normal_logpdf,
    std_normal_logpdf_sum,
    student_t_dlogpdf,
    student_t_logpdf,
)
from .transforms import (
    corr_chol_backward,
    corr_chol_forward,
    corr_chol_logdet_terms,
    corr_free_size,
)

LATENT_KINDS = ("C", "IGP", "LMC")
KERNEL_KINDS = ("EXP", "NSM32")
OBS_KINDS = ("BB", "DM")

_NAME_RE = re.compile(r"^(C|IGP|LMC(\d+))(-(S|NS))?-(BB|DM)$")


@dataclass(frozen=True)
class ModelSpec:
    """One model configuration: latent kind, kernel kind, observation kind,
    group structure, and prior hyperparameters."""

    latent: str
    kernel: str | None
    observation: str
    groups: GroupStructure
    lmc_k: int = 1
    priors: PriorConfig = field(default_factory=PriorConfig)
    kernel_map: tuple | None = None

    def __post_init__(self):
        if self.latent not in LATENT_KINDS:
            raise ValidationError(f"unknown latent kind {self.latent!r}")
        if self.observation not in OBS_KINDS:
            raise ValidationError(f"unknown observation kind {self.observation!r}")
        if self.latent == "C":
            if self.kernel is not None:
                raise ValidationError("constant latent model takes no kernel")
        else:
            if self.kernel not in KERNEL_KINDS:
                raise ValidationError(f"unknown kernel kind {self.kernel!r}")
        J = self.groups.n_species
        if self.latent == "LMC":
            if J < 2:
                raise ValidationError("coregionalization needs at least 2 species")
            if not 1 <= self.lmc_k <= J:
                raise ValidationError(f"lmc_k must be in 1..{J}, got {self.lmc_k}")
        if self.kernel_map is not None:
            species_kernel_map(J, self.k_distinct, self.kernel_map)  # validates

    @property
    def n_species(self):
        return self.groups.n_species

    @property
    def obs_groups(self):
        """Group structure actually used by the observation layer."""
        return self.groups.singletonized() if self.observation == "BB" else self.groups

    @property
    def k_distinct(self):
        if self.latent == "C":
            return 0
        if self.latent == "IGP":
            return self.n_species
        return self.lmc_k

    @property
    def nonstationary(self):
        return self.kernel == "NSM32"

    def kmap(self):
        """Species -> distinct kernel assignment."""
        if self.latent == "C":
            return ()
        return species_kernel_map(self.n_species, self.k_distinct, self.kernel_map)

    def name(self):
        if self.latent == "C":
            head = "C"
        elif self.latent == "IGP":
            head = f"IGP-{'NS' if self.nonstationary else 'S'}"
        else:
            head = f"LMC{self.lmc_k}-{'NS' if self.nonstationary else 'S'}"
        return f"{head}-{self.observation}"

    @classmethod
    def from_name(cls, name, groups, priors=None, kernel_map=None):
        m = _NAME_RE.match(name.strip())
        if not m:
            raise ValidationError(f"cannot parse model name {name!r}")
        head, knum, _, kern, obs = m.groups()
        priors = priors if priors is not None else PriorConfig()
        if head == "C":
            if kern is not None:
                raise ValidationError("constant model name takes no S/NS tag")
            return cls("C", None, obs, groups, priors=priors)
        if kern is None:
            raise ValidationError(f"model {name!r} needs an S or NS tag")
        kernel = "NSM32" if kern == "NS" else "EXP"
        if head == "IGP":
            return cls("IGP", kernel, obs, groups, priors=priors, kernel_map=kernel_map)
        return cls(
            "LMC", kernel, obs, groups, lmc_k=int(knum), priors=priors, kernel_map=kernel_map
        )


def table_model_names():
    """The twelve standard configurations of the comparison grid."""
    return (
        "C-BB",
        "C-DM",
        "IGP-S-BB",
        "IGP-NS-BB",
        "IGP-S-DM",
        "IGP-NS-DM",
        "LMC1-S-BB",
        "LMC1-NS-BB",
        "LMC1-S-DM",
        "LMC1-NS-DM",
        "LMC2-S-DM",
        "LMC2-NS-DM",
    )


class ParameterPacker:
    """Layout of the flat unconstrained vector for one (spec, n) pair.

    Block order: beta, log_gamma, log_omega, corr free parameters, kernel
    hyperparameters per distinct kernel, whitened latents z, whitened
    length-scale fields zl.  pack(unpack(theta)) == theta bit for bit.
    """

    def __init__(self, spec: ModelSpec, n: int):
        self.spec = spec
        self.n = int(n)
        J = spec.n_species
        blocks = [("beta", J), ("log_gamma", spec.obs_groups.n_groups)]
        if spec.latent != "C":
            blocks.append(("log_omega", J))
            if spec.latent == "LMC":
                blocks.append(("corr", corr_free_size(J)))
            for m in range(spec.k_distinct):
                if spec.nonstationary:
                    blocks.append((f"mu_logl[{m}]", 1))
                    blocks.append((f"log_ell_field[{m}]", 1))
                    blocks.append((f"log_var_field[{m}]", 1))
                else:
                    blocks.append((f"log_ell[{m}]", 1))
            blocks.append(("z", J * self.n))
            if spec.nonstationary:
                blocks.append(("zl", spec.k_distinct * self.n))
        self.blocks = tuple(blocks)
        self.slices = {}
        off = 0
        for name, size in blocks:
            self.slices[name] = slice(off, off + size)
            off += size
        self.dim = off

    def view(self, theta, name):
        return theta[self.slices[name]]

    def column_names(self):
        J = self.spec.n_species
        names = []
        for name, size in self.blocks:
            if name == "beta":
                names += [f"beta[{j}]" for j in range(size)]
            elif name == "log_gamma":
                names += [f"log_gamma[{g}]" for g in range(size)]
            elif name == "log_omega":
                names += [f"log_omega[{j}]" for j in range(size)]
            elif name == "corr":
                names += [f"corr[{j},{k}]" for j in range(1, J) for k in range(j)]
            elif name == "z":
                names += [f"z[{j},{i}]" for j in range(J) for i in range(self.n)]
            elif name == "zl":
                names += [
                    f"zl[{m},{i}]" for m in range(self.spec.k_distinct) for i in range(self.n)
                ]
            else:
                names.append(name)
        return names


def dimension(spec: ModelSpec, n: int) -> int:
    """Sampler dimension implied by a spec and a plot count."""
    return ParameterPacker(spec, n).dim


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError("non-finite intermediate value")


class Posterior:
    """Callable joint log posterior for one (spec, dataset) pair.

    Caches everything that does not depend on the parameter vector:
    pairwise distances, per-group count matrices with the empty class, and
    the multinomial coefficients of the likelihood.
    """

    def __init__(self, spec: ModelSpec, dataset, jitter=DEFAULT_JITTER):
        if dataset.groups != spec.groups:
            raise ValidationError("dataset group structure does not match the model spec")
        self.spec = spec
        self.jitter = jitter
        self.locs = np.asarray(dataset.locs, dtype=float)
        self.n = self.locs.shape[0]
        self.packer = ParameterPacker(spec, self.n)
        self.dim = self.packer.dim
        self.D2 = pairwise_sq_dists(self.locs)
        self.D = np.sqrt(self.D2)
        self.n_rejected = 0

        counts = np.asarray(dataset.counts, dtype=np.int64)
        og = spec.obs_groups
        declared = spec.groups
        self._og_index = []
        for g, members in enumerate(og.groups):
            idx = np.asarray(members, dtype=int)
            if spec.observation == "BB":
                Nvec = dataset.N[:, declared.group_of(int(idx[0]))].astype(np.int64)
            else:
                Nvec = dataset.N[:, g].astype(np.int64)
            Y = counts[:, idx]
            if np.any(Y.sum(axis=1) > Nvec):
                raise ValidationError(f"counts exceed resolution in observation group {g}")
            Y_aug = np.concatenate([Y, (Nvec - Y.sum(axis=1))[:, None]], axis=1)
            log_coef = gammaln(Nvec + 1.0) - gammaln(Y_aug + 1.0).sum(axis=1)
            self._og_index.append((idx, Nvec.astype(float), Y_aug, log_coef))

    # -- forward construction ------------------------------------------------

    def _forward(self, theta):
        """Constrained quantities and latent matrix for one state.

        Raises NumericalError on any non-finite intermediate or failed
        factorization; callers convert that to a -inf density.
        """
        spec, p = self.spec, self.packer
        th = np.asarray(theta, dtype=float)
        if th.shape != (self.dim,):
            raise ValidationError(f"theta must have shape ({self.dim},), got {th.shape}")
        _finite(th)
        J, n = spec.n_species, self.n
        s = {"theta": th}
        s["beta"] = p.view(th, "beta")
        s["u_gamma"] = p.view(th, "log_gamma")
        s["gamma"] = np.exp(s["u_gamma"])
        _finite(s["gamma"])
        if spec.latent == "C":
            s["F"] = np.repeat(s["beta"][:, None], n, axis=1)
            return s
        s["u_omega"] = p.view(th, "log_omega")
        s["omega"] = np.exp(s["u_omega"])
        _finite(s["omega"])
        if spec.latent == "LMC":
            Lcorr, Wtanh = corr_chol_forward(p.view(th, "corr"), J)
            s["Lcorr"], s["Wtanh"] = Lcorr, Wtanh
        kmap = spec.kmap()
        s["kmap"] = kmap
        s["z"] = p.view(th, "z").reshape(J, n)
        chols, Ks = [], []
        if spec.nonstationary:
            s["zl"] = p.view(th, "zl").reshape(spec.k_distinct, n)
            s["field"] = []
        for m in range(spec.k_distinct):
            if spec.nonstationary:
                mu = p.view(th, f"mu_logl[{m}]")[0]
                ellf = np.exp(p.view(th, f"log_ell_field[{m}]")[0])
                s2f = np.exp(p.view(th, f"log_var_field[{m}]")[0])
                _finite(np.array([ellf, s2f]))
                Kf = s2f * (exp_cov_matrix(self.D, ellf) + self.jitter * np.eye(n))
                Lf, _ = jittered_cholesky(Kf, jitter=0.0, escalate=False, context="(log-l field)")
                logl = mu + Lf @ s["zl"][m]
                lvec = np.exp(logl)
                _finite(lvec)
                K = matern32_nonstat_matrix(self.D2, lvec) + self.jitter * np.eye(n)
                s["field"].append({"mu": mu, "ellf": ellf, "s2f": s2f, "Kf": Kf, "Lf": Lf, "lvec": lvec})
            else:
                ell = np.exp(p.view(th, f"log_ell[{m}]")[0])
                _finite(np.array([ell]))
                K = exp_cov_matrix(self.D, ell) + self.jitter * np.eye(n)
                s.setdefault("ell", []).append(ell)
            L, _ = jittered_cholesky(K, jitter=0.0, escalate=False, context="(latent kernel)")
            Ks.append(K)
            chols.append(L)
        s["K"], s["chol"] = Ks, chols
        W = np.empty((J, n))
        for j in range(J):
            W[j] = chols[kmap[j]] @ s["z"][j]
        s["W"] = W
        if spec.latent == "LMC":
            s["M"] = s["Lcorr"] @ W
        else:
            s["M"] = W
        s["eps"] = s["omega"][:, None] * s["M"]
        s["F"] = s["beta"][:, None] + s["eps"]
        _finite(s["F"])
        return s

    # -- densities -----------------------------------------------------------

    def _loglik(self, s, want_grad):
        spec = self.spec
        total = 0.0
        Fbar = np.zeros_like(s["F"]) if want_grad else None
        dgamma = np.zeros(spec.obs_groups.n_groups) if want_grad else None
        for g, (idx, Nvec, Y_aug, log_coef) in enumerate(self._og_index):
            Fg = s["F"][idx, :].T
            if want_grad:
                ll, dF, dg = dirmult_loglik_and_grad_f(Y_aug, Nvec, Fg, s["gamma"][g], log_coef)
                Fbar[idx, :] += dF.T
                dgamma[g] = dg
            else:
                Alpha = softmax_alpha_rows(Fg)
                ll = float(dirmult_logpmf_rows(Y_aug, Nvec, Alpha, s["gamma"][g], log_coef).sum())
            total += ll
        return total, Fbar, dgamma

    def _logprior(self, s, want_grad):
        spec, pr = self.spec, self.spec.priors
        grads = {} if want_grad else None
        lp = float(np.sum(student_t_logpdf(s["beta"], 0.0, pr.beta_scale, pr.beta_df)))
        if want_grad:
            grads["beta"] = student_t_dlogpdf(s["beta"], 0.0, pr.beta_scale, pr.beta_df)
        lp += float(np.sum(gamma_logpdf(s["gamma"], pr.gamma_shape, pr.gamma_rate))) + float(
            np.sum(s["u_gamma"])
        )
        if want_grad:
            grads["u_gamma"] = gamma_dlogpdf(s["gamma"], pr.gamma_shape, pr.gamma_rate) * s[
                "gamma"
            ] + 1.0
        if spec.latent == "C":
            return lp, grads
        lp += float(np.sum(half_student_t_logpdf(s["omega"], pr.omega_scale, pr.omega_df))) + float(
            np.sum(s["u_omega"])
        )
        if want_grad:
            grads["u_omega"] = (
                half_student_t_dlogpdf(s["omega"], pr.omega_scale, pr.omega_df) * s["omega"] + 1.0
            )
        if spec.latent == "LMC":
            val, gcorr = corr_chol_logdet_terms(s["Wtanh"], spec.n_species, eta=pr.lkj_shape)
            lp += val
            if want_grad:
                grads["corr"] = gcorr
        for m in range(spec.k_distinct):
            if spec.nonstationary:
                f = s["field"][m]
                lp += float(normal_logpdf(f["mu"], pr.mu_logl_loc, pr.mu_logl_var))
                lp += inv_half_student_t_logpdf(
                    f["ellf"], pr.field_inv_ell_scale, pr.field_inv_ell_df
                ) + np.log(f["ellf"])
                lp += half_student_t_logpdf(f["s2f"], pr.field_var_scale, pr.field_var_df) + np.log(
                    f["s2f"]
                )
                if want_grad:
                    grads[f"mu[{m}]"] = float(normal_dlogpdf(f["mu"], pr.mu_logl_loc, pr.mu_logl_var))
                    grads[f"u_ellf[{m}]"] = (
                        inv_half_student_t_dlogpdf(
                            f["ellf"], pr.field_inv_ell_scale, pr.field_inv_ell_df
                        )
                        * f["ellf"]
                        + 1.0
                    )
                    grads[f"u_s2f[{m}]"] = (
                        half_student_t_dlogpdf(f["s2f"], pr.field_var_scale, pr.field_var_df)
                        * f["s2f"]
                        + 1.0
                    )
            else:
                ell = s["ell"][m]
                lp += inv_half_student_t_logpdf(ell, pr.inv_ell_scale, pr.inv_ell_df) + np.log(ell)
                if want_grad:
                    grads[f"u_ell[{m}]"] = (
                        inv_half_student_t_dlogpdf(ell, pr.inv_ell_scale, pr.inv_ell_df) * ell + 1.0
                    )
        lp += std_normal_logpdf_sum(s["z"])
        if spec.nonstationary:
            lp += std_normal_logpdf_sum(s["zl"])
        return lp, grads

    def logp(self, theta):
        """Joint unnormalized log posterior; -inf on numerical failure."""
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                s = self._forward(theta)
                ll, _, _ = self._loglik(s, want_grad=False)
                lp, _ = self._logprior(s, want_grad=False)
                total = ll + lp
        except NumericalError:
            self.n_rejected += 1
            return -np.inf
        if not np.isfinite(total):
            self.n_rejected += 1
            return -np.inf
        return total

    def loglik(self, theta):
        """Likelihood part only (used by group-factorization checks)."""
        s = self._forward(theta)
        ll, _, _ = self._loglik(s, want_grad=False)
        return ll

    def logp_grad(self, theta):
        """(log posterior, gradient); (-inf, zeros) on numerical failure."""
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                return self._logp_grad(theta)
        except NumericalError:
            self.n_rejected += 1
            return -np.inf, np.zeros(self.dim)

    def _logp_grad(self, theta):
        spec, p = self.spec, self.packer
        s = self._forward(theta)
        ll, Fbar, dgamma = self._loglik(s, want_grad=True)
        lp, grads = self._logprior(s, want_grad=True)
        total = ll + lp
        if not np.isfinite(total):
            raise NumericalError("non-finite log posterior")

        grad = np.zeros(self.dim)
        grad[p.slices["beta"]] = Fbar.sum(axis=1) + grads["beta"]
        grad[p.slices["log_gamma"]] = dgamma * s["gamma"] + grads["u_gamma"]
        if spec.latent == "C":
            _finite(grad)
            return total, grad

        J, n = spec.n_species, self.n
        epsbar = Fbar
        if spec.latent == "LMC":
            Mbar = s["omega"][:, None] * epsbar
            omega_bar = (epsbar * s["M"]).sum(axis=1)
            Wbar = s["Lcorr"].T @ Mbar
            Lcorr_bar = np.tril(Mbar @ s["W"].T)
            grad[p.slices["corr"]] = (
                corr_chol_backward(Lcorr_bar, s["Lcorr"], s["Wtanh"], J) + grads["corr"]
            )
        else:
            Wbar = s["omega"][:, None] * epsbar
            omega_bar = (epsbar * s["W"]).sum(axis=1)
        grad[p.slices["log_omega"]] = omega_bar * s["omega"] + grads["u_omega"]

        zbar = np.empty((J, n))
        Cbar = [np.zeros((n, n)) for _ in range(spec.k_distinct)]
        kmap = s["kmap"]
        for j in range(J):
            Lk = s["chol"][kmap[j]]
            zbar[j] = Lk.T @ Wbar[j] - s["z"][j]
            Cbar[kmap[j]] += np.outer(Wbar[j], s["z"][j])
        grad[p.slices["z"]] = zbar.ravel()

        for m in range(spec.k_distinct):
            Kbar = chol_rev(s["chol"][m], Cbar[m])
            if spec.nonstationary:
                f = s["field"][m]
                G = symmetrize_pair_sensitivity(Kbar)
                dKdl = matern32_nonstat_matrix_grad(self.D2, f["lvec"])
                lbar = (G * dKdl).sum(axis=1)
                loglbar = lbar * f["lvec"]
                grad[p.slices[f"mu_logl[{m}]"]] = loglbar.sum() + grads[f"mu[{m}]"]
                zlbar = f["Lf"].T @ loglbar - s["zl"][m]
                grad_zl = p.slices["zl"]
                grad[grad_zl.start + m * n : grad_zl.start + (m + 1) * n] = zlbar
                Cfbar = np.outer(loglbar, s["zl"][m])
                Kfbar = chol_rev(f["Lf"], Cfbar)
                # dKf/d log s2f = Kf (jitter is multiplicative in s2f)
                grad[p.slices[f"log_var_field[{m}]"]] = (
                    float((Kfbar * np.tril(f["Kf"])).sum()) + grads[f"u_s2f[{m}]"]
                )
                offdiag = np.tril(Kfbar, -1) * np.tril(f["Kf"], -1) * np.tril(self.D, -1)
                grad[p.slices[f"log_ell_field[{m}]"]] = float(offdiag.sum()) / f["ellf"] + grads[
                    f"u_ellf[{m}]"
                ]
            else:
                ell = s["ell"][m]
                offdiag = np.tril(Kbar, -1) * np.tril(s["K"][m], -1) * np.tril(self.D, -1)
                grad[p.slices[f"log_ell[{m}]"]] = float(offdiag.sum()) / ell + grads[f"u_ell[{m}]"]
        _finite(grad)
        return total, grad

    # -- reporting helpers -----------------------------------------------------

    def constrained_state(self, theta):
        """Named constrained quantities for one draw (prediction/reporting)."""
        return self._forward(np.asarray(theta, dtype=float))


def log_posterior(theta, dataset, spec: ModelSpec) -> float:
    """Convenience wrapper; build a :class:`Posterior` for repeated use."""
    return Posterior(spec, dataset).logp(theta)


def grad_log_posterior(theta, dataset, spec: ModelSpec):
    """Gradient of the joint log posterior at ``theta``."""
    return Posterior(spec, dataset).logp_grad(theta)[1]
