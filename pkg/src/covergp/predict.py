"""Posterior predictive machinery: conditional extension of the latent
fields to new locations, mesh construction over a region, per-cell cover
draws, and area-total summaries.

Conditioning exploits the whitened parameterization: each species' unit
field at the data sites is available per draw, so prediction needs only
per-kernel n x n solves and an n* x n* factorization, never a Jn x Jn
system.  For non-stationary models the log-length-scale field is itself
conditioned first, then the cross-covariances are assembled from the
realized length scales at the new sites.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import ValidationError
from .kernels import exp_cov_matrix, matern32_nonstat_matrix, pairwise_sq_dists
from .linalg import jittered_cholesky
from .model import Posterior
from .observation import softmax_alpha_rows


# -- regions and meshes --------------------------------------------------------


@dataclass(frozen=True)
class Region:
    """Study region: rectangle, disc, or simple polygon, with optional
    excluded holes (same shapes)."""

    kind: str
    params: tuple
    holes: tuple = ()

    def __post_init__(self):
        if self.kind not in ("rect", "disc", "polygon"):
            raise ValidationError(f"unknown region kind {self.kind!r}")
        p = tuple(self.params)
        if self.kind == "rect":
            if len(p) != 4 or p[2] <= p[0] or p[3] <= p[1]:
                raise ValidationError("rect needs (xmin, ymin, xmax, ymax) with positive extent")
        elif self.kind == "disc":
            if len(p) != 3 or p[2] <= 0:
                raise ValidationError("disc needs (cx, cy, radius > 0)")
        else:
            if len(p) < 3:
                raise ValidationError("polygon needs >= 3 vertices")
        object.__setattr__(self, "params", p)

    def bbox(self):
        if self.kind == "rect":
            return self.params
        if self.kind == "disc":
            cx, cy, r = self.params
            return (cx - r, cy - r, cx + r, cy + r)
        xs = [v[0] for v in self.params]
        ys = [v[1] for v in self.params]
        return (min(xs), min(ys), max(xs), max(ys))

    def contains(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.kind == "rect":
            x0, y0, x1, y1 = self.params
            inside = (
                (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
            )
        elif self.kind == "disc":
            cx, cy, r = self.params
            inside = (pts[:, 0] - cx) ** 2 + (pts[:, 1] - cy) ** 2 <= r * r
        else:
            inside = _points_in_polygon(pts, np.asarray(self.params, dtype=float))
        for hole in self.holes:
            inside &= ~hole.contains(pts)
        return inside

    def to_dict(self):
        d = {"kind": self.kind, "params": [list(p) if isinstance(p, (tuple, list)) else p for p in self.params]}
        if self.holes:
            d["holes"] = [h.to_dict() for h in self.holes]
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"kind", "params", "holes"}
        if unknown:
            raise ValidationError(f"unknown region keys: {sorted(unknown)}")
        holes = tuple(cls.from_dict(h) for h in d.get("holes", ()))
        params = tuple(tuple(p) if isinstance(p, (tuple, list)) else p for p in d["params"])
        return cls(kind=d["kind"], params=params, holes=holes)


def _points_in_polygon(pts, verts):
    """Ray casting; boundary points count as inside within float tolerance."""
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        crosses = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < np.where(crosses, xint, np.inf))
    return inside


@dataclass(frozen=True)
class PredictionMesh:
    """Regular square-cell mesh over a region's bounding box with a mask
    selecting the cells whose centroids fall inside the region."""

    centroids: np.ndarray      # (n_cells, 2), unmasked cells only
    cell_area: float
    nx: int
    ny: int
    origin: tuple              # (x0, y0) of the bounding box
    inside: np.ndarray         # (ny, nx) bool, True where cell is kept

    @property
    def n_cells(self):
        return self.centroids.shape[0]

    def grid(self, values, fill=np.nan):
        """Scatter per-cell values back onto the (ny, nx) grid."""
        out = np.full((self.ny, self.nx), fill, dtype=float)
        out[self.inside] = values
        return out


def build_mesh(region: Region, cell_area=4.0) -> PredictionMesh:
    if cell_area <= 0:
        raise ValidationError("cell_area must be positive")
    x0, y0, x1, y1 = region.bbox()
    s = float(np.sqrt(cell_area))
    nx = max(1, int(np.ceil((x1 - x0) / s - 1e-9)))
    ny = max(1, int(np.ceil((y1 - y0) / s - 1e-9)))
    cx = x0 + (np.arange(nx) + 0.5) * s
    cy = y0 + (np.arange(ny) + 0.5) * s
    X, Y = np.meshgrid(cx, cy)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    inside = region.contains(pts).reshape(ny, nx)
    if not inside.any():
        raise ValidationError("mesh has no cells inside the region")
    return PredictionMesh(
        centroids=pts[inside.ravel()],
        cell_area=float(cell_area),
        nx=nx,
        ny=ny,
        origin=(float(x0), float(y0)),
        inside=inside,
    )


# -- conditional latent extension ----------------------------------------------


def _conditional_gaussian(L_train, cross, prior_new, values, prior_mean=0.0, mean_train=0.0):
    """Mean and covariance of a GP at new sites given training values.

    L_train : Cholesky of the training covariance
    cross   : (n_train, n_new) covariance between training and new sites
    prior_new : (n_new, n_new) prior covariance at the new sites
    values  : (n_train,) observed field values
    """
    a = cho_solve((L_train, True), values - mean_train, check_finite=False)
    mean = prior_mean + cross.T @ a
    half = solve_triangular(L_train, cross, lower=True, check_finite=False)
    cov = prior_new - half.T @ half
    return mean, cov


def conditional_latent_draws(
    post: Posterior,
    run,
    new_locs,
    rng,
    draw_indices=None,
    return_means=False,
):
    """Sample the species latents f at new locations for posterior draws.

    Returns an (M, J, n_new) array (and optionally the conditional means
    of the same shape).  For every draw the latent draw is a single sample
    from the exact Gaussian conditional implied by that draw's parameters.
    """
    new_locs = np.atleast_2d(np.asarray(new_locs, dtype=float))
    spec = post.spec
    J = spec.n_species
    n_new = new_locs.shape[0]
    flat = run.combined()
    if draw_indices is None:
        draw_indices = np.arange(flat.shape[0])
    M = len(draw_indices)
    out = np.empty((M, J, n_new))
    means = np.empty((M, J, n_new)) if return_means else None

    if spec.latent == "C":
        for mi, m in enumerate(draw_indices):
            beta = flat[m][post.packer.slices["beta"]]
            out[mi] = np.repeat(beta[:, None], n_new, axis=1)
        if return_means:
            means[:] = out
        return (out, means) if return_means else out

    D2_cross = pairwise_sq_dists(post.locs, new_locs)
    D_cross = np.sqrt(D2_cross)
    D2_new = pairwise_sq_dists(new_locs)
    D_new = np.sqrt(D2_new)
    kmap = spec.kmap()

    for mi, m in enumerate(draw_indices):
        s = post.constrained_state(flat[m])
        U = np.empty((J, n_new))
        Umean = np.empty((J, n_new)) if return_means else None
        for k in range(spec.k_distinct):
            if spec.nonstationary:
                f = s["field"][k]
                cross_f = f["s2f"] * np.exp(-D_cross / f["ellf"])
                prior_f = f["s2f"] * (
                    np.exp(-D_new / f["ellf"]) + post.jitter * np.eye(n_new)
                )
                mean_f, cov_f = _conditional_gaussian(
                    f["Lf"], cross_f, prior_f, np.log(f["lvec"]),
                    prior_mean=f["mu"], mean_train=f["mu"],
                )
                Lf_new, _ = jittered_cholesky(cov_f, context="(log-l conditional)")
                logl_new = mean_f + Lf_new @ rng.standard_normal(n_new)
                lvec_new = np.exp(logl_new)
                cross = matern32_nonstat_matrix(D2_cross, f["lvec"], lvec_new)
                prior = matern32_nonstat_matrix(D2_new, lvec_new) + post.jitter * np.eye(n_new)
            else:
                ell = s["ell"][k]
                cross = np.exp(-D_cross / ell)
                prior = np.exp(-D_new / ell) + post.jitter * np.eye(n_new)
            L_new = None
            for j in range(J):
                if kmap[j] != k:
                    continue
                mean_u, cov_u = _conditional_gaussian(
                    s["chol"][k], cross, prior, s["W"][j]
                )
                if L_new is None:  # same conditional covariance for the kernel
                    L_new, _ = jittered_cholesky(cov_u, context="(latent conditional)")
                U[j] = mean_u + L_new @ rng.standard_normal(n_new)
                if return_means:
                    Umean[j] = mean_u
        if spec.latent == "LMC":
            eps = s["omega"][:, None] * (s["Lcorr"] @ U)
            if return_means:
                eps_mean = s["omega"][:, None] * (s["Lcorr"] @ Umean)
        else:
            eps = s["omega"][:, None] * U
            if return_means:
                eps_mean = s["omega"][:, None] * Umean
        out[mi] = s["beta"][:, None] + eps
        if return_means:
            means[mi] = s["beta"][:, None] + eps_mean
    return (out, means) if return_means else out


def gamma_draws(post: Posterior, run, draw_indices=None):
    """Per-draw process concentrations, (M, n_obs_groups)."""
    flat = run.combined()
    if draw_indices is None:
        draw_indices = np.arange(flat.shape[0])
    sl = post.packer.slices["log_gamma"]
    return np.exp(flat[np.asarray(draw_indices)][:, sl])


# -- cover prediction ------------------------------------------------------------


@dataclass
class CoverDraws:
    """Posterior predictive cover fractions: per draw x cell x species,
    plus the per-group empty-class fraction.  Within each exclusive group
    the species fractions and the empty fraction sum to one."""

    species: np.ndarray        # (M, n_cells, J)
    empty: dict                # obs-group index -> (M, n_cells)
    alpha: np.ndarray          # (M, n_cells, J) expected covers
    obs_groups: object
    counts: np.ndarray | None = None   # (M, n_cells, J) when requested


def predict_cover(post: Posterior, run, mesh_or_locs, rng, draw_indices=None, count_resolution=None):
    """Draw posterior predictive covers at mesh cells (or arbitrary points).

    Per posterior draw: extend the latents, softmax them into expected
    covers, then draw the realized cover simplex from the concentration
    model.  ``count_resolution`` additionally draws integer counts at the
    given resolution.
    """
    locs = mesh_or_locs.centroids if isinstance(mesh_or_locs, PredictionMesh) else mesh_or_locs
    F = conditional_latent_draws(post, run, locs, rng, draw_indices=draw_indices)
    G = gamma_draws(post, run, draw_indices=draw_indices)
    M, J, n_cells = F.shape
    spec = post.spec
    og = spec.obs_groups
    species = np.empty((M, n_cells, J))
    alpha_all = np.empty((M, n_cells, J))
    empty = {g: np.empty((M, n_cells)) for g in range(og.n_groups)}
    counts = np.empty((M, n_cells, J), dtype=np.int64) if count_resolution else None
    for m in range(M):
        for g, members in enumerate(og.groups):
            idx = list(members)
            alpha = softmax_alpha_rows(F[m, idx, :].T)      # (cells, q+1)
            conc = alpha * G[m, g]
            gam_draws = rng.standard_gamma(conc)
            total = gam_draws.sum(axis=1, keepdims=True)
            phi = gam_draws / np.where(total > 0, total, 1.0)
            species[m, :, idx] = phi[:, :-1].T
            alpha_all[m, :, idx] = alpha[:, :-1].T
            empty[g][m] = phi[:, -1]
            if counts is not None:
                for c in range(n_cells):
                    counts[m, c, idx] = rng.multinomial(int(count_resolution), phi[c])[:-1]
    return CoverDraws(species=species, empty=empty, alpha=alpha_all, obs_groups=og, counts=counts)


@dataclass
class TotalCoverSummary:
    """Area-total cover distributions: per-species, per declared group,
    and across all species."""

    species_draws: np.ndarray  # (M, J)
    group_draws: np.ndarray    # (M, p) sums over declared groups
    overall_draws: np.ndarray  # (M,)
    species_names: tuple

    def summary(self, levels=(0.5, 0.9, 0.95)):
        def stats(d):
            out = {"mean": float(np.mean(d)), "sd": float(np.std(d, ddof=1))}
            for lv in levels:
                lo, hi = np.quantile(d, [(1 - lv) / 2, 1 - (1 - lv) / 2])
                out[f"ci{int(lv * 100)}"] = [float(lo), float(hi)]
            return out

        return {
            "species": [stats(self.species_draws[:, j]) for j in range(self.species_draws.shape[1])],
            "groups": [stats(self.group_draws[:, g]) for g in range(self.group_draws.shape[1])],
            "overall": stats(self.overall_draws),
        }


def total_cover(cover: CoverDraws, declared_groups, species_names=()) -> TotalCoverSummary:
    """Area-weighted mean cover over cells, per draw; cells have equal
    area so the weight is uniform over unmasked cells."""
    species_draws = cover.species.mean(axis=1)  # (M, J)
    p = declared_groups.n_groups
    group_draws = np.column_stack(
        [species_draws[:, list(members)].sum(axis=1) for members in declared_groups.groups]
    )
    overall = species_draws.sum(axis=1)
    names = species_names or tuple(f"sp{j}" for j in range(species_draws.shape[1]))
    return TotalCoverSummary(
        species_draws=species_draws,
        group_draws=group_draws,
        overall_draws=overall,
        species_names=names,
    )


# -- outputs ---------------------------------------------------------------------


def write_pgm16(path, grid, lo=0.0, hi=1.0):
    """16-bit binary PGM of a (ny, nx) grid; values are clipped to [lo, hi]
    and scaled to 0..65535; NaN (masked) cells map to 0.  Row 0 of the
    image is the top (largest y)."""
    g = np.asarray(grid, dtype=float)
    scaled = np.clip((g - lo) / (hi - lo), 0.0, 1.0)
    scaled = np.where(np.isfinite(scaled), scaled, 0.0)
    img = np.flipud((scaled * 65535.0).round().astype(">u2"))
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode())
        fh.write(img.tobytes())


def write_prediction_outputs(outdir, cover: CoverDraws, mesh: PredictionMesh, totals: TotalCoverSummary):
    """CSV rasters (posterior mean and sd per species), 16-bit PGM maps,
    total-cover draw vectors, and a JSON summary."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    mean = cover.species.mean(axis=0)  # (cells, J)
    sd = cover.species.std(axis=0, ddof=1)
    J = mean.shape[1]
    for j in range(J):
        name = totals.species_names[j]
        for tag, vals in (("mean", mean[:, j]), ("sd", sd[:, j])):
            grid = mesh.grid(vals)
            np.savetxt(outdir / f"cover_{tag}_{name}.csv", grid, delimiter=",", fmt="%.8g")
            write_pgm16(outdir / f"cover_{tag}_{name}.pgm", grid)
    header = ",".join(totals.species_names)
    np.savetxt(
        outdir / "total_cover_draws.csv",
        totals.species_draws,
        delimiter=",",
        fmt="%.10g",
        header=header,
        comments="",
    )
    (outdir / "summary.json").write_text(
        json.dumps(totals.summary(), indent=2, sort_keys=True)
    )
    return outdir
