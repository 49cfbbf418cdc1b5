"""Dataset container and CSV ingestion.

On-disk unit is counts: an observed cover fraction is stored as the number
of occupied mesh cells out of the group resolution N.  Percent input is
converted at load time (banker's rounding) with a warning when the implied
count is more than half a cell away from an integer.

Files (UTF-8, comma separated, header row, '.' decimal):

* plots.csv    : plot_id, x, y
* species.csv  : species_id, name, group_id
* groups.csv   : group_id, name, resolution
* counts.csv   : plot_id, species_id, count      (or 'percent' column)
* n_override.csv (optional): plot_id, group_id, resolution
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .observation import GroupStructure


@dataclass
class Dataset:
    """Plot locations, per-plot per-species counts, and the group layout.

    locs   : (n, 2) float array of plot centroids in meters
    counts : (n, J) integer count matrix
    groups : GroupStructure over the J species
    N      : (n, p) per-plot per-group resolutions
    """

    locs: np.ndarray
    counts: np.ndarray
    groups: GroupStructure
    N: np.ndarray
    species_names: tuple = ()
    plot_ids: tuple = ()

    def __post_init__(self):
        self.locs = np.asarray(self.locs, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.N = np.asarray(self.N, dtype=np.int64)
        n = self.locs.shape[0]
        J = self.groups.n_species
        p = self.groups.n_groups
        if self.locs.ndim != 2 or self.locs.shape[1] != 2:
            raise ValidationError(f"locs must be (n, 2), got {self.locs.shape}")
        if not np.all(np.isfinite(self.locs)):
            raise ValidationError("non-finite plot coordinates")
        if self.counts.shape != (n, J):
            raise ValidationError(f"counts must be ({n}, {J}), got {self.counts.shape}")
        if self.N.shape != (n, p):
            raise ValidationError(f"N must be ({n}, {p}), got {self.N.shape}")
        if np.any(self.counts < 0):
            raise ValidationError("negative counts")
        if np.any(self.N < 1):
            raise ValidationError("resolutions must be >= 1")
        for g, members in enumerate(self.groups.groups):
            tot = self.counts[:, list(members)].sum(axis=1)
            bad = np.nonzero(tot > self.N[:, g])[0]
            if bad.size:
                raise ValidationError(
                    f"group {g} counts exceed resolution at plot rows {bad[:5].tolist()}"
                )
        if not self.species_names:
            self.species_names = tuple(f"sp{j}" for j in range(J))
        if not self.plot_ids:
            self.plot_ids = tuple(str(i) for i in range(n))

    @property
    def n_plots(self):
        return self.locs.shape[0]

    def subset(self, rows):
        """New dataset restricted to the given plot rows (used by CV folds)."""
        rows = np.asarray(rows, dtype=int)
        return Dataset(
            locs=self.locs[rows],
            counts=self.counts[rows],
            groups=self.groups,
            N=self.N[rows],
            species_names=self.species_names,
            plot_ids=tuple(self.plot_ids[i] for i in rows),
        )


def _read_rows(path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"missing input file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValidationError(f"{path}: empty file")
        rows = [(i + 2, {k.strip(): v.strip() for k, v in r.items()}) for i, r in enumerate(reader)]
    return rows, [f.strip() for f in reader.fieldnames]


def _need(row, key, path, lineno, conv=str):
    if key not in row or row[key] == "":
        raise ValidationError(f"{path} line {lineno}: missing column {key!r}")
    try:
        return conv(row[key])
    except ValueError as exc:
        raise ValidationError(f"{path} line {lineno}: bad value for {key!r}: {row[key]!r}") from exc


def load_dataset(plots, species, groups, counts, n_override=None):
    """Load and cross-validate the four CSV inputs into a Dataset."""
    plot_rows, _ = _read_rows(plots)
    plot_ids, xs, ys = [], [], []
    for lineno, r in plot_rows:
        plot_ids.append(_need(r, "plot_id", plots, lineno))
        xs.append(_need(r, "x", plots, lineno, float))
        ys.append(_need(r, "y", plots, lineno, float))
    if len(set(plot_ids)) != len(plot_ids):
        raise ValidationError(f"{plots}: duplicate plot ids")
    plot_index = {pid: i for i, pid in enumerate(plot_ids)}

    group_rows, _ = _read_rows(groups)
    group_ids, resolutions = [], []
    for lineno, r in group_rows:
        group_ids.append(_need(r, "group_id", groups, lineno))
        resolutions.append(_need(r, "resolution", groups, lineno, int))
    if len(set(group_ids)) != len(group_ids):
        raise ValidationError(f"{groups}: duplicate group ids")
    group_index = {gid: g for g, gid in enumerate(group_ids)}

    sp_rows, _ = _read_rows(species)
    sp_ids, sp_names, sp_groups = [], [], []
    for lineno, r in sp_rows:
        sp_ids.append(_need(r, "species_id", species, lineno))
        sp_names.append(r.get("name", "") or sp_ids[-1])
        gid = _need(r, "group_id", species, lineno)
        if gid not in group_index:
            raise ValidationError(f"{species} line {lineno}: unknown group_id {gid!r}")
        sp_groups.append(group_index[gid])
    if len(set(sp_ids)) != len(sp_ids):
        raise ValidationError(f"{species}: duplicate species ids")
    sp_index = {sid: j for j, sid in enumerate(sp_ids)}
    members = tuple(
        tuple(j for j in range(len(sp_ids)) if sp_groups[j] == g) for g in range(len(group_ids))
    )
    structure = GroupStructure(groups=members, resolutions=tuple(resolutions))

    n, J, p = len(plot_ids), len(sp_ids), len(group_ids)
    N = np.repeat(np.asarray(resolutions, dtype=np.int64)[None, :], n, axis=0)
    if n_override is not None:
        ov_rows, _ = _read_rows(n_override)
        for lineno, r in ov_rows:
            pid = _need(r, "plot_id", n_override, lineno)
            gid = _need(r, "group_id", n_override, lineno)
            res = _need(r, "resolution", n_override, lineno, int)
            if pid not in plot_index:
                raise ValidationError(f"{n_override} line {lineno}: unknown plot_id {pid!r}")
            if gid not in group_index:
                raise ValidationError(f"{n_override} line {lineno}: unknown group_id {gid!r}")
            N[plot_index[pid], group_index[gid]] = res

    count_rows, fields = _read_rows(counts)
    has_percent = "percent" in fields
    has_count = "count" in fields
    if has_percent == has_count:
        raise ValidationError(f"{counts}: need exactly one of 'count' or 'percent' columns")
    Y = np.zeros((n, J), dtype=np.int64)
    seen = np.zeros((n, J), dtype=bool)
    for lineno, r in count_rows:
        pid = _need(r, "plot_id", counts, lineno)
        sid = _need(r, "species_id", counts, lineno)
        if pid not in plot_index:
            raise ValidationError(f"{counts} line {lineno}: unknown plot_id {pid!r}")
        if sid not in sp_index:
            raise ValidationError(f"{counts} line {lineno}: unknown species_id {sid!r}")
        i, j = plot_index[pid], sp_index[sid]
        if seen[i, j]:
            raise ValidationError(f"{counts} line {lineno}: duplicate (plot, species) entry")
        seen[i, j] = True
        if has_count:
            y = _need(r, "count", counts, lineno, int)
        else:
            pct = _need(r, "percent", counts, lineno, float)
            res = N[i, sp_groups[j]]
            raw = pct / 100.0 * res
            y = int(np.rint(raw))  # round half to even
            if abs(raw - y) > 0.5 - 1e-9:  # half a cell off: resolution mismatch
                warnings.warn(
                    f"{counts} line {lineno}: percent {pct} is {abs(raw - y):.2f} counts away "
                    f"from an integer at resolution {res}",
                    stacklevel=2,
                )
        if y < 0:
            raise ValidationError(f"{counts} line {lineno}: negative count")
        Y[i, j] = y

    for g, mem in enumerate(members):
        tot = Y[:, list(mem)].sum(axis=1)
        bad = np.nonzero(tot > N[:, g])[0]
        if bad.size:
            i = int(bad[0])
            raise ValidationError(
                f"{counts}: group {group_ids[g]!r} total {int(tot[i])} exceeds resolution "
                f"{int(N[i, g])} at plot {plot_ids[i]!r}"
            )

    return Dataset(
        locs=np.column_stack([xs, ys]),
        counts=Y,
        groups=structure,
        N=N,
        species_names=tuple(sp_names),
        plot_ids=tuple(plot_ids),
    )


def save_dataset(dataset: Dataset, outdir):
    """Write a dataset back out as the four CSV files; returns the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "plots": outdir / "plots.csv",
        "species": outdir / "species.csv",
        "groups": outdir / "groups.csv",
        "counts": outdir / "counts.csv",
    }
    with open(paths["plots"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["plot_id", "x", "y"])
        for pid, (x, y) in zip(dataset.plot_ids, dataset.locs):
            w.writerow([pid, repr(float(x)), repr(float(y))])
    with open(paths["groups"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["group_id", "name", "resolution"])
        for g, res in enumerate(dataset.groups.resolutions):
            w.writerow([f"g{g}", f"group{g}", res])
    with open(paths["species"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["species_id", "name", "group_id"])
        for j, name in enumerate(dataset.species_names):
            w.writerow([f"s{j}", name, f"g{dataset.groups.group_of(j)}"])
    with open(paths["counts"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["plot_id", "species_id", "count"])
        for i, pid in enumerate(dataset.plot_ids):
            for j in range(dataset.groups.n_species):
                w.writerow([pid, f"s{j}", int(dataset.counts[i, j])])
    if not np.all(dataset.N == dataset.N[0:1, :]) or not np.array_equal(
        dataset.N[0], np.asarray(dataset.groups.resolutions)
    ):
        paths["n_override"] = outdir / "n_override.csv"
        with open(paths["n_override"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["plot_id", "group_id", "resolution"])
            base = np.asarray(dataset.groups.resolutions)
            for i, pid in enumerate(dataset.plot_ids):
                for g in range(dataset.groups.n_groups):
                    if dataset.N[i, g] != base[g]:
                        w.writerow([pid, f"g{g}", int(dataset.N[i, g])])
    return paths
