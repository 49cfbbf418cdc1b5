"""Hamiltonian Monte Carlo with dual-averaging step-size adaptation and
windowed diagonal mass estimation, a multi-chain driver, and the
convergence diagnostics (potential scale reduction, initial-monotone-
sequence effective sample size).

The transition is Metropolis-corrected fixed-length leapfrog with the step
count jittered uniformly per draw, which avoids trajectory-length
resonances while keeping the kernel simple to verify.  Chains draw from
independent counter-based RNG streams (Philox spawned per chain) so that
running them serially, threaded, or out of order gives identical output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import next_fast_len, rfft, irfft

from .errors import NumericalError, ValidationError
from .model import ModelSpec, ParameterPacker, Posterior


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    iterations: int = 2000
    warmup: int = 1000
    target_accept: float = 0.8
    max_leapfrog: int = 32
    max_energy_error: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        if self.chains < 1:
            raise ValidationError("need at least one chain")
        if not 0 < self.warmup < self.iterations:
            raise ValidationError("need 0 < warmup < iterations")
        if not 0 < self.target_accept < 1:
            raise ValidationError("target_accept must be in (0, 1)")
        if self.max_leapfrog < 1:
            raise ValidationError("max_leapfrog must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown sampler keys: {sorted(unknown)}")
        kw = dict(d)
        for k in ("chains", "iterations", "warmup", "max_leapfrog", "seed"):
            if k in kw:
                kw[k] = int(kw[k])
        return cls(**kw)


def hmc_draw(theta, lp, grad, logp_grad, eps, inv_mass, n_steps, rng, max_energy_error=1000.0):
    """One Metropolis-corrected leapfrog proposal.

    Parameters
    ----------
    theta, lp, grad : current state and its cached log density / gradient
    logp_grad : callable theta -> (logp, grad)
    eps : leapfrog step size
    inv_mass : (dim,) diagonal inverse mass (posterior variance scale)
    n_steps : number of leapfrog steps (0 keeps the state, accept = 1)

    Returns
    -------
    (theta, lp, grad, accepted, accept_stat, divergent, energy_error)
    """
    dim = theta.shape[0]
    r = rng.standard_normal(dim) / np.sqrt(inv_mass)
    kin0 = 0.5 * float(r * inv_mass @ r)
    h0 = -lp + kin0
    th, l, g = theta, lp, grad
    diverged = False
    if n_steps > 0:
        r = r + 0.5 * eps * g
        for step in range(n_steps):
            th = th + eps * inv_mass * r
            l, g = logp_grad(th)
            if not np.isfinite(l):
                diverged = True
                break
            r = r + (eps if step < n_steps - 1 else 0.5 * eps) * g
    if diverged:
        return theta, lp, grad, False, 0.0, True, np.inf
    kin1 = 0.5 * float(r * inv_mass @ r)
    h1 = -l + kin1
    d_energy = h1 - h0
    if not np.isfinite(d_energy) or abs(d_energy) > max_energy_error:
        return theta, lp, grad, False, 0.0, True, d_energy
    accept_stat = float(np.exp(min(0.0, -d_energy)))
    if rng.random() < accept_stat:
        return th, l, g, True, accept_stat, False, d_energy
    return theta, lp, grad, False, accept_stat, False, d_energy


class _DualAveraging:
    """Nesterov-style dual averaging of log step size toward a target
    acceptance statistic."""

    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * eps0)
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.t = 0
        self.h_bar = 0.0
        self.log_eps = np.log(eps0)
        self.log_eps_bar = 0.0

    def update(self, accept_stat):
        self.t += 1
        frac = 1.0 / (self.t + self.t0)
        self.h_bar = (1 - frac) * self.h_bar + frac * (self.target - accept_stat)
        self.log_eps = self.mu - np.sqrt(self.t) / self.gamma * self.h_bar
        w = self.t ** (-self.kappa)
        self.log_eps_bar = w * self.log_eps + (1 - w) * self.log_eps_bar
        return np.exp(self.log_eps)

    def adapted(self):
        return float(np.exp(self.log_eps_bar))


class _Welford:
    def __init__(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def push(self, x):
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def variance(self):
        if self.n < 2:
            return np.ones_like(self.mean)
        return self.m2 / (self.n - 1)


def find_reasonable_epsilon(theta, lp, grad, logp_grad, inv_mass, rng, eps0=0.1):
    """Double/halve the step size until one leapfrog step has acceptance
    probability crossing 1/2."""
    eps = eps0
    for _ in range(60):
        _, _, _, _, stat, div, d_energy = hmc_draw(
            theta, lp, grad, logp_grad, eps, inv_mass, 1, rng, max_energy_error=np.inf
        )
        if div or not np.isfinite(d_energy):
            eps *= 0.5
            continue
        direction = 1.0 if stat > 0.5 else -1.0
        break
    else:
        return eps
    for _ in range(60):
        eps_next = eps * (2.0**direction)
        _, _, _, _, stat, div, d_energy = hmc_draw(
            theta, lp, grad, logp_grad, eps_next, inv_mass, 1, rng, max_energy_error=np.inf
        )
        ok = not div and np.isfinite(d_energy)
        if direction > 0 and not (ok and stat > 0.5):
            break
        if direction < 0 and (ok and stat > 0.5):
            eps = eps_next
            break
        eps = eps_next
    return eps


def _warmup_windows(warmup):
    """(fast, slow window sizes, final fast) schedule; slow windows double."""
    if warmup < 20:
        return warmup, [], 0
    init = max(1, int(round(0.15 * warmup)))
    term = max(1, int(round(0.10 * warmup)))
    slow_total = warmup - init - term
    windows = []
    w = max(1, int(round(0.05 * warmup)))
    remaining = slow_total
    while remaining > 0:
        if 2 * w >= remaining:
            windows.append(remaining)
            remaining = 0
        else:
            windows.append(w)
            remaining -= w
            w *= 2
    return init, windows, term


def run_chain(logp_grad, theta0, config: SamplerConfig, rng, collect_warmup=False):
    """One adaptive HMC chain; returns draws and adaptation diagnostics."""
    theta = np.asarray(theta0, dtype=float).copy()
    lp, grad = logp_grad(theta)
    if not np.isfinite(lp):
        raise NumericalError("initial state has zero posterior density")
    dim = theta.size
    inv_mass = np.ones(dim)
    eps = find_reasonable_epsilon(theta, lp, grad, logp_grad, inv_mass, rng)
    da = _DualAveraging(eps, config.target_accept)
    init, slow, term = _warmup_windows(config.warmup)
    boundaries = np.cumsum([init] + slow).tolist()
    n_keep = config.iterations - config.warmup
    draws = np.empty((n_keep, dim))
    accept_stats = []
    divergences = 0
    warmup_divergences = 0
    welford = _Welford(dim) if slow else None
    warmup_draws = np.empty((config.warmup, dim)) if collect_warmup else None

    for it in range(config.iterations):
        adapting = it < config.warmup
        steps = int(rng.integers(1, config.max_leapfrog + 1))
        theta, lp, grad, _, stat, div, _ = hmc_draw(
            theta, lp, grad, logp_grad, eps, inv_mass, steps, rng, config.max_energy_error
        )
        if adapting:
            eps = da.update(stat)
            if div:
                warmup_divergences += 1
            if welford is not None and it >= init and it < boundaries[-1]:
                welford.push(theta)
                if (it + 1) in boundaries:
                    n = welford.n
                    var = welford.variance()
                    inv_mass = var * (n / (n + 5.0)) + 1e-3 * (5.0 / (n + 5.0))
                    welford = _Welford(dim)
                    eps = find_reasonable_epsilon(theta, lp, grad, logp_grad, inv_mass, rng, eps)
                    da = _DualAveraging(eps, config.target_accept)
            if collect_warmup:
                warmup_draws[it] = theta
            if it == config.warmup - 1:
                eps = da.adapted()
        else:
            if div:
                divergences += 1
            accept_stats.append(stat)
            draws[it - config.warmup] = theta
    return {
        "draws": draws,
        "warmup_draws": warmup_draws,
        "step_size": eps,
        "inv_mass": inv_mass,
        "accept_rate": float(np.mean(accept_stats)) if accept_stats else float("nan"),
        "divergences": divergences,
        "warmup_divergences": warmup_divergences,
    }


def run_chains(logp_grad, dim, config: SamplerConfig, initial=None, threads=1):
    """Multi-chain driver around :func:`run_chain`.

    ``initial`` is either None (standard normal / 10), a single vector, or
    a callable rng -> theta0 evaluated per chain.  Chains are independent
    and deterministic given the seed regardless of the thread count.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)
    rngs = [np.random.Generator(np.random.Philox(s)) for s in seeds]

    def make_theta0(c):
        if initial is None:
            return 0.1 * rngs[c].standard_normal(dim)
        if callable(initial):
            return np.asarray(initial(rngs[c]), dtype=float)
        return np.asarray(initial, dtype=float)

    jobs = list(range(config.chains))

    def work(c):
        return run_chain(logp_grad, make_theta0(c), config, rngs[c])

    if threads > 1 and config.chains > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, jobs))
    else:
        results = [work(c) for c in jobs]
    return results


@dataclass
class PosteriorRun:
    """Post-warmup draws of every chain plus adaptation diagnostics."""

    draws: np.ndarray          # (chains, n_draws, dim)
    columns: tuple
    seed: int
    config: SamplerConfig
    step_sizes: tuple
    accept_rates: tuple
    divergences: tuple
    inv_mass: np.ndarray       # (chains, dim)
    spec_name: str = ""
    spec_hash: str = ""
    n_rejected: int = 0

    @property
    def n_chains(self):
        return self.draws.shape[0]

    @property
    def n_draws(self):
        return self.draws.shape[1]

    @property
    def dim(self):
        return self.draws.shape[2]

    def combined(self):
        return self.draws.reshape(-1, self.dim)

    def diagnostics_table(self):
        """Per-coordinate split R-hat and summed per-chain ESS."""
        rows = []
        for d, name in enumerate(self.columns):
            chains = self.draws[:, :, d]
            r = rhat_split(chains) if self.n_chains >= 2 else float("nan")
            e = sum(ess_geyer(chains[c]) for c in range(self.n_chains))
            rows.append(
                {
                    "name": name,
                    "mean": float(chains.mean()),
                    "sd": float(chains.std(ddof=1)),
                    "rhat": float(r),
                    "ess": float(e),
                }
            )
        return rows

    def save(self, outdir, csv=True):
        """Flat binary draw matrix + JSON header (+ optional CSV export)."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        flat = self.combined().astype("<f8")
        (outdir / "draws.bin").write_bytes(flat.tobytes(order="C"))
        header = {
            "columns": list(self.columns),
            "chains": self.n_chains,
            "draws_per_chain": self.n_draws,
            "seed": self.seed,
            "spec_name": self.spec_name,
            "spec_hash": self.spec_hash,
            "step_sizes": [float(s) for s in self.step_sizes],
            "accept_rates": [float(a) for a in self.accept_rates],
            "divergences": [int(v) for v in self.divergences],
            "sampler": self.config.to_dict(),
            "n_rejected": int(self.n_rejected),
        }
        (outdir / "draws.json").write_text(json.dumps(header, indent=2, sort_keys=True))
        if csv:
            with open(outdir / "draws.csv", "w", encoding="utf-8") as fh:
                fh.write(",".join(self.columns) + "\n")
                np.savetxt(fh, flat, delimiter=",", fmt="%.17g")
        return outdir

    @classmethod
    def load(cls, outdir):
        outdir = Path(outdir)
        header = json.loads((outdir / "draws.json").read_text())
        flat = np.frombuffer((outdir / "draws.bin").read_bytes(), dtype="<f8")
        chains = header["chains"]
        per = header["draws_per_chain"]
        dim = len(header["columns"])
        draws = flat.reshape(chains, per, dim).copy()
        return cls(
            draws=draws,
            columns=tuple(header["columns"]),
            seed=header["seed"],
            config=SamplerConfig.from_dict(header["sampler"]),
            step_sizes=tuple(header["step_sizes"]),
            accept_rates=tuple(header["accept_rates"]),
            divergences=tuple(header["divergences"]),
            inv_mass=np.zeros((chains, dim)),
            spec_name=header.get("spec_name", ""),
            spec_hash=header.get("spec_hash", ""),
            n_rejected=header.get("n_rejected", 0),
        )


def spec_fingerprint(spec: ModelSpec, n: int) -> str:
    payload = {
        "name": spec.name(),
        "groups": spec.groups.to_dict(),
        "priors": spec.priors.to_dict(),
        "kernel_map": list(spec.kernel_map) if spec.kernel_map is not None else None,
        "n": int(n),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def initial_theta(spec: ModelSpec, n: int, rng):
    """Dispersed initial state centered on prior-scale values per block."""
    packer = ParameterPacker(spec, n)
    theta = np.empty(packer.dim)
    centers = {
        "beta": 0.0,
        "log_gamma": np.log(2.25),
        "log_omega": 0.0,
        "corr": 0.0,
    }
    for name, _ in packer.blocks:
        sl = packer.slices[name]
        size = sl.stop - sl.start
        if name in centers:
            theta[sl] = centers[name] + 0.4 * rng.standard_normal(size)
        elif name.startswith("log_ell_field"):
            theta[sl] = np.log(10.0) + 0.3 * rng.standard_normal(size)
        elif name.startswith("log_ell"):
            theta[sl] = np.log(10.0) + 0.3 * rng.standard_normal(size)
        elif name.startswith("mu_logl"):
            theta[sl] = np.log(12.0) + 0.3 * rng.standard_normal(size)
        elif name.startswith("log_var_field"):
            theta[sl] = np.log(0.5) + 0.3 * rng.standard_normal(size)
        elif name in ("z", "zl"):
            theta[sl] = 0.1 * rng.standard_normal(size)
        else:  # pragma: no cover - every block is named above
            theta[sl] = 0.1 * rng.standard_normal(size)
    return theta


def run(spec: ModelSpec, dataset, config: SamplerConfig, threads=1) -> PosteriorRun:
    """Fit one model: multi-chain adaptive HMC on the joint posterior."""
    post = Posterior(spec, dataset)
    results = run_chains(
        post.logp_grad,
        post.dim,
        config,
        initial=lambda rng: initial_theta(spec, post.n, rng),
        threads=threads,
    )
    draws = np.stack([r["draws"] for r in results])
    return PosteriorRun(
        draws=draws,
        columns=tuple(post.packer.column_names()),
        seed=config.seed,
        config=config,
        step_sizes=tuple(r["step_size"] for r in results),
        accept_rates=tuple(r["accept_rate"] for r in results),
        divergences=tuple(r["divergences"] for r in results),
        inv_mass=np.stack([r["inv_mass"] for r in results]),
        spec_name=spec.name(),
        spec_hash=spec_fingerprint(spec, post.n),
        n_rejected=post.n_rejected,
    )


# -- diagnostics --------------------------------------------------------------


def rhat(chains):
    """Potential scale reduction factor over >= 2 chains of equal length,
    floored at 1 (values below 1 are estimation noise)."""
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValidationError("need a (chains, draws) array with >= 2 chains")
    C, N = x.shape
    if N < 2:
        raise ValidationError("need >= 2 draws per chain")
    within = x.var(axis=1, ddof=1).mean()
    between = N * x.mean(axis=1).var(ddof=1)
    if within == 0:
        return 1.0 if between == 0 else np.inf
    var_plus = (N - 1) / N * within + between / N
    return float(max(1.0, np.sqrt(var_plus / within)))


def rhat_split(chains):
    """Split-chain variant: halves each chain before computing the PSRF,
    so a trend inside a chain also inflates the statistic."""
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2:
        raise ValidationError("need a (chains, draws) array")
    half = x.shape[1] // 2
    if half < 2:
        raise ValidationError("chains too short to split")
    halves = np.concatenate([x[:, :half], x[:, half : 2 * half]], axis=0)
    return rhat(halves)


def ess_geyer(chain):
    """Effective sample size by the initial monotone sequence criterion.

    Pairs of autocorrelations are summed; the sum is truncated at the
    first negative pair and forced nonincreasing.  A constant chain is
    degenerate and reports 0.
    """
    x = np.asarray(chain, dtype=float)
    if x.ndim != 1 or x.size < 4:
        raise ValidationError("need a 1-D chain of length >= 4")
    n = x.size
    x = x - x.mean()
    c0 = float(x @ x) / n
    if c0 == 0 or not np.isfinite(c0):
        return 0.0
    m = next_fast_len(2 * n)
    f = rfft(x, m)
    acov = irfft(f * np.conj(f), m)[:n].real / n
    rho = acov / acov[0]
    tau = -1.0
    prev = np.inf
    for k in range(n // 2):
        pair = rho[2 * k] + (rho[2 * k + 1] if 2 * k + 1 < n else 0.0)
        if pair <= 0:
            break
        pair = min(pair, prev)
        prev = pair
        tau += 2.0 * pair
    tau = max(tau, 1e-12)
    return float(n / tau)
