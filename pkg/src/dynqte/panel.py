"""Experiment panels: data model, CSV ingestion and switchback designs.

Arrays use 0-based ``(day, time[, region])`` indexing.  The original
``day``/``time``/``region`` labels read from a file are kept so that a
dataset can be written back in the same form.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataValidationError

__all__ = [
    "PanelDataset",
    "SpatioPanelDataset",
    "adjacency_matrix",
    "alternating_design",
    "neighbor_mean",
    "design_row",
    "load_panel_csv",
    "load_regions_csv",
    "write_panel_csv",
    "write_regions_csv",
]

TEMPORAL_KEYS = ("day", "time", "action", "outcome")
SPATIAL_KEYS = ("day", "time", "region", "action", "outcome")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _label_key(label: str):
    # numeric labels sort numerically, anything else lexicographically after them
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def _check_actions(actions):
    a = np.asarray(actions)
    if np.issubdtype(a.dtype, np.floating):
        if not np.all(np.isin(a, (0.0, 1.0))):
            raise DataValidationError("actions must be exactly 0 or 1")
    elif not np.all((a == 0) | (a == 1)):
        raise DataValidationError("actions must be exactly 0 or 1")
    return a.astype(np.int8)


@dataclass(frozen=True)
class PanelDataset:
    """Temporal switchback panel over ``n`` days and ``m`` intervals.

    Attributes
    ----------
    outcomes : ndarray, shape (n, m)
    states : ndarray, shape (n, m, d)
    actions : ndarray of int8, shape (n, m)
    day_labels, time_labels : tuple of str
        Labels used when writing the panel back to CSV.
    """

    outcomes: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    day_labels: tuple = None
    time_labels: tuple = None

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float)
        s = np.asarray(self.states, dtype=float)
        if y.ndim != 2:
            raise DataValidationError(f"outcomes must be (n, m), got shape {y.shape}")
        if s.ndim == 2:
            s = s[:, :, None]
        if s.ndim != 3 or s.shape[:2] != y.shape:
            raise DataValidationError(
                f"states shape {s.shape} inconsistent with outcomes {y.shape}"
            )
        a = np.asarray(self.actions)
        if a.shape != y.shape:
            raise DataValidationError(f"actions shape {a.shape} inconsistent with {y.shape}")
        a = _check_actions(a)
        n, m, d = s.shape
        if n < 2 or m < 2 or d < 1:
            raise DataValidationError(f"need n >= 2, m >= 2, d >= 1; got n={n}, m={m}, d={d}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(s))):
            raise DataValidationError("outcomes and states must be finite")
        object.__setattr__(self, "outcomes", _frozen(y, float))
        object.__setattr__(self, "states", _frozen(s, float))
        object.__setattr__(self, "actions", _frozen(a, np.int8))
        days = self.day_labels or tuple(str(i + 1) for i in range(n))
        times = self.time_labels or tuple(str(t + 1) for t in range(m))
        if len(days) != n or len(times) != m:
            raise DataValidationError("label lengths do not match the array shape")
        object.__setattr__(self, "day_labels", tuple(str(x) for x in days))
        object.__setattr__(self, "time_labels", tuple(str(x) for x in times))

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]

    @property
    def m(self) -> int:
        return self.outcomes.shape[1]

    @property
    def d(self) -> int:
        return self.states.shape[2]

    def design(self) -> np.ndarray:
        """All design rows ``(1, S, A)``, shape (n, m, d + 2)."""
        ones = np.ones(self.outcomes.shape + (1,))
        return np.concatenate([ones, self.states, self.actions[..., None].astype(float)], axis=2)

    def take_days(self, index) -> PanelDataset:
        index = np.asarray(index)
        return PanelDataset(
            self.outcomes[index],
            self.states[index],
            self.actions[index],
            tuple(self.day_labels[i] for i in index),
            self.time_labels,
        )

    def time_window(self, start: int, stop: int) -> PanelDataset:
        """Keep intervals ``start <= t < stop`` (0-based positions)."""
        sl = slice(start, stop)
        return PanelDataset(
            self.outcomes[:, sl],
            self.states[:, sl],
            self.actions[:, sl],
            self.day_labels,
            self.time_labels[sl],
        )


@dataclass(frozen=True)
class SpatioPanelDataset:
    """Spatiotemporal panel over ``n`` days, ``m`` intervals and ``r`` regions.

    Attributes
    ----------
    outcomes : ndarray, shape (n, m, r)
    states : ndarray, shape (n, m, r, d)
    actions : ndarray of int8, shape (n, m, r)
    neighbors : tuple of tuple of int
        Region indices adjacent to each region.
    coords : ndarray, shape (r, 2)
        Longitude and latitude of each region.
    """

    outcomes: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    neighbors: tuple
    coords: np.ndarray
    day_labels: tuple = None
    time_labels: tuple = None
    region_labels: tuple = None
    _adjacency: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float)
        s = np.asarray(self.states, dtype=float)
        if y.ndim != 3:
            raise DataValidationError(f"outcomes must be (n, m, r), got shape {y.shape}")
        if s.ndim == 3:
            s = s[..., None]
        if s.ndim != 4 or s.shape[:3] != y.shape:
            raise DataValidationError(
                f"states shape {s.shape} inconsistent with outcomes {y.shape}"
            )
        a = np.asarray(self.actions)
        if a.shape != y.shape:
            raise DataValidationError(f"actions shape {a.shape} inconsistent with {y.shape}")
        a = _check_actions(a)
        n, m, r, d = s.shape
        if n < 2 or m < 2 or d < 1:
            raise DataValidationError(f"need n >= 2, m >= 2, d >= 1; got n={n}, m={m}, d={d}")
        if r < 2:
            raise DataValidationError(f"need at least 2 regions, got {r}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(s))):
            raise DataValidationError("outcomes and states must be finite")
        coords = np.asarray(self.coords, dtype=float)
        if coords.shape != (r, 2) or not np.all(np.isfinite(coords)):
            raise DataValidationError(f"coords must be finite with shape ({r}, 2)")
        nbrs = tuple(tuple(int(k) for k in row) for row in self.neighbors)
        adj = adjacency_matrix(nbrs, r, self.region_labels)

        object.__setattr__(self, "outcomes", _frozen(y, float))
        object.__setattr__(self, "states", _frozen(s, float))
        object.__setattr__(self, "actions", _frozen(a, np.int8))
        object.__setattr__(self, "coords", _frozen(coords, float))
        object.__setattr__(self, "neighbors", nbrs)
        object.__setattr__(self, "_adjacency", _frozen(adj, float))
        labels = {
            "day_labels": (self.day_labels, n),
            "time_labels": (self.time_labels, m),
            "region_labels": (self.region_labels, r),
        }
        for name, (lab, size) in labels.items():
            lab = lab or tuple(str(k + 1) for k in range(size))
            if len(lab) != size:
                raise DataValidationError(f"{name} has {len(lab)} entries, expected {size}")
            object.__setattr__(self, name, tuple(str(x) for x in lab))

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]

    @property
    def m(self) -> int:
        return self.outcomes.shape[1]

    @property
    def r(self) -> int:
        return self.outcomes.shape[2]

    @property
    def d(self) -> int:
        return self.states.shape[3]

    def neighbor_mean(self) -> np.ndarray:
        """Average neighbor action, shape (n, m, r)."""
        return neighbor_mean(self.actions, self._adjacency)

    def design(self) -> np.ndarray:
        """All design rows ``(1, S, A, Abar)``, shape (n, m, r, d + 3)."""
        ones = np.ones(self.outcomes.shape + (1,))
        a = self.actions[..., None].astype(float)
        return np.concatenate([ones, self.states, a, self.neighbor_mean()[..., None]], axis=3)

    def region(self, k: int) -> PanelDataset:
        """Temporal panel of a single region (spillover terms dropped)."""
        return PanelDataset(
            self.outcomes[:, :, k],
            self.states[:, :, k],
            self.actions[:, :, k],
            self.day_labels,
            self.time_labels,
        )

    def take_days(self, index) -> SpatioPanelDataset:
        index = np.asarray(index)
        return SpatioPanelDataset(
            self.outcomes[index],
            self.states[index],
            self.actions[index],
            self.neighbors,
            self.coords,
            tuple(self.day_labels[i] for i in index),
            self.time_labels,
            self.region_labels,
        )

    def permute_regions(self, perm) -> SpatioPanelDataset:
        """Relabel regions so that new region ``k`` is old region ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        nbrs = tuple(tuple(int(inv[j]) for j in self.neighbors[p]) for p in perm)
        return SpatioPanelDataset(
            self.outcomes[:, :, perm],
            self.states[:, :, perm],
            self.actions[:, :, perm],
            nbrs,
            self.coords[perm],
            self.day_labels,
            self.time_labels,
            tuple(self.region_labels[p] for p in perm),
        )

    def time_window(self, start: int, stop: int) -> SpatioPanelDataset:
        sl = slice(start, stop)
        return SpatioPanelDataset(
            self.outcomes[:, sl],
            self.states[:, sl],
            self.actions[:, sl],
            self.neighbors,
            self.coords,
            self.day_labels,
            self.time_labels[sl],
            self.region_labels,
        )


def adjacency_matrix(nbrs, r, labels=None) -> np.ndarray:
    """Row-normalized adjacency matrix after checking the neighbor relation."""
    if len(nbrs) != r:
        raise DataValidationError(f"neighbor lists given for {len(nbrs)} regions, expected {r}")

    def name(k):
        return labels[k] if labels else str(k)

    adj = np.zeros((r, r))
    for k, row in enumerate(nbrs):
        if not row:
            raise DataValidationError(f"region {name(k)} has no neighbors")
        for j in row:
            if not 0 <= j < r:
                raise DataValidationError(f"region {name(k)} lists unknown neighbor index {j}")
            if j == k:
                raise DataValidationError(f"region {name(k)} lists itself as a neighbor")
            if adj[k, j]:
                raise DataValidationError(f"region {name(k)} lists neighbor {name(j)} twice")
            adj[k, j] = 1.0
    asym = np.argwhere(adj != adj.T)
    if asym.size:
        k, j = asym[0]
        raise DataValidationError(
            f"neighbor relation is not symmetric: {name(k)} -> {name(j)} has no reverse entry"
            if adj[k, j]
            else f"neighbor relation is not symmetric: {name(j)} -> {name(k)} has no reverse entry"
        )
    return adj / adj.sum(axis=1, keepdims=True)


def neighbor_mean(actions, adjacency) -> np.ndarray:
    """Mean neighbor action for actions of shape (..., r)."""
    return np.asarray(actions, dtype=float) @ np.asarray(adjacency).T


def alternating_design(m: int, TI: int, start: int = 1) -> np.ndarray:
    """Switchback treatment sequence over one day.

    The first ``TI`` intervals receive ``start`` and the action flips every
    ``TI`` intervals after that.

    >>> alternating_design(5, 2, 1).tolist()
    [1, 1, 0, 0, 1]
    """
    if m < 1 or TI < 1:
        raise ValueError(f"need m >= 1 and TI >= 1, got m={m}, TI={TI}")
    if start not in (0, 1):
        raise ValueError(f"start must be 0 or 1, got {start}")
    if TI > m:
        raise ValueError(f"TI={TI} exceeds m={m}: the design would be constant within the day")
    block = (np.arange(m) // TI) % 2
    return (block ^ start).astype(np.int8)


def design_row(dataset, i: int, t: int, region: int | None = None) -> np.ndarray:
    """Design vector ``(1, S, A)`` or, with a region, ``(1, S, A, Abar)``."""
    if isinstance(dataset, SpatioPanelDataset):
        if region is None:
            raise ValueError("a region index is required for spatiotemporal data")
        k = region
        nb = dataset.neighbors[k]
        abar = sum(int(dataset.actions[i, t, j]) for j in nb) / len(nb)
        return np.concatenate(
            [[1.0], dataset.states[i, t, k], [float(dataset.actions[i, t, k]), abar]]
        )
    if region is not None:
        raise ValueError("temporal panels have no region axis")
    return np.concatenate([[1.0], dataset.states[i, t], [float(dataset.actions[i, t])]])


# ---------------------------------------------------------------------------
# CSV


def _parse_float(text, row, col):
    if text is None or text.strip() == "":
        raise DataValidationError(f"missing value in column '{col}'", row=row)
    try:
        v = float(text)
    except ValueError:
        raise DataValidationError(f"column '{col}' is not a number: {text!r}", row=row) from None
    if not math.isfinite(v):
        raise DataValidationError(f"column '{col}' is not finite: {text!r}", row=row)
    return v


def _parse_action(text, row):
    if text is None or text.strip() == "":
        raise DataValidationError("missing value in column 'action'", row=row)
    t = text.strip()
    if t in ("0", "1"):
        return int(t)
    try:
        v = float(t)
    except ValueError:
        v = None
    if v in (0.0, 1.0):
        return int(v)
    raise DataValidationError(f"action must be 0 or 1, got {text!r}", row=row)


def _state_columns(header, nkeys, path):
    cols = header[nkeys:]
    if not cols:
        raise DataValidationError(f"{path}: no state columns")
    want = [f"state_{k + 1}" for k in range(len(cols))]
    if cols != want:
        raise DataValidationError(f"{path}: state columns must be {','.join(want)}, got {','.join(cols)}")
    return len(cols)


def load_panel_csv(path, schema: str = "temporal", regions=None):
    """Read a panel from CSV.

    Parameters
    ----------
    path : path-like
        ``day,time,action,outcome,state_1,...`` for temporal panels or
        ``day,time,region,action,outcome,state_1,...`` for spatiotemporal
        ones.  Row order is irrelevant.
    schema : {"temporal", "spatiotemporal"}
    regions : path-like or tuple, optional
        Region sidecar file (see :func:`load_regions_csv`) or an already
        loaded ``(labels, coords, neighbors)`` triple.  Required for
        spatiotemporal panels.
    """
    if schema not in ("temporal", "spatiotemporal"):
        raise ValueError(f"unknown schema {schema!r}")
    spatial = schema == "spatiotemporal"
    keys = SPATIAL_KEYS if spatial else TEMPORAL_KEYS
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        if tuple(header[: len(keys)]) != keys:
            raise DataValidationError(
                f"{path}: header must start with {','.join(keys)}, got {','.join(header)}"
            )
        d = _state_columns(header, len(keys), path)
        width = len(header)
        records = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise DataValidationError(
                    f"expected {width} columns ({d} states), found {len(row)}", row=lineno
                )
            for col, cell in zip(header, row):
                if cell.strip() == "":
                    raise DataValidationError(f"missing value in column '{col}'", row=lineno)
            key = tuple(c.strip() for c in row[: len(keys) - 2])
            if key in records:
                raise DataValidationError(
                    f"duplicate key ({','.join(key)}) first seen on row {records[key][0]}",
                    row=lineno,
                )
            action = _parse_action(row[len(keys) - 2], lineno)
            outcome = _parse_float(row[len(keys) - 1], lineno, "outcome")
            states = [_parse_float(c, lineno, h) for c, h in zip(row[len(keys):], header[len(keys):])]
            records[key] = (lineno, action, outcome, states)
    if not records:
        raise DataValidationError(f"{path}: no data rows")

    days = sorted({k[0] for k in records}, key=_label_key)
    times = sorted({k[1] for k in records}, key=_label_key)
    if spatial:
        if regions is None:
            raise DataValidationError("spatiotemporal panels need a region sidecar")
        if not isinstance(regions, tuple):
            regions = load_regions_csv(regions)
        rlabels, coords, nbrs = regions
        present = {k[2] for k in records}
        unknown = present - set(rlabels)
        if unknown:
            raise DataValidationError(f"regions missing from the sidecar: {sorted(unknown)}")
        axes = (days, times, list(rlabels))
    else:
        axes = (days, times)
    pos = [{lab: j for j, lab in enumerate(ax)} for ax in axes]
    shape = tuple(len(ax) for ax in axes)
    y = np.full(shape, np.nan)
    s = np.full(shape + (d,), np.nan)
    a = np.zeros(shape, dtype=np.int8)
    seen = np.zeros(shape, dtype=bool)
    for key, (_, action, outcome, states) in records.items():
        idx = tuple(p[k] for p, k in zip(pos, key))
        y[idx] = outcome
        s[idx] = states
        a[idx] = action
        seen[idx] = True
    if not seen.all():
        miss = tuple(int(v) for v in np.argwhere(~seen)[0])
        lab = ",".join(ax[j] for ax, j in zip(axes, miss))
        raise DataValidationError(f"{path}: panel is incomplete, no row for key ({lab})")
    if spatial:
        return SpatioPanelDataset(y, s, a, nbrs, coords, tuple(days), tuple(times), tuple(rlabels))
    return PanelDataset(y, s, a, tuple(days), tuple(times))


def load_regions_csv(path):
    """Read a region sidecar ``region,lon,lat,neighbors``.

    Returns ``(labels, coords, neighbors)`` with neighbors as index tuples.
    Neighbor ids are separated by ``;``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        if header != ["region", "lon", "lat", "neighbors"]:
            raise DataValidationError(f"{path}: header must be region,lon,lat,neighbors")
        labels, coords, raw, lines = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataValidationError(f"expected 4 columns, found {len(row)}", row=lineno)
            lab = row[0].strip()
            if not lab:
                raise DataValidationError("missing value in column 'region'", row=lineno)
            if lab in labels:
                raise DataValidationError(f"duplicate region {lab!r}", row=lineno)
            labels.append(lab)
            coords.append([_parse_float(row[1], lineno, "lon"), _parse_float(row[2], lineno, "lat")])
            raw.append([x.strip() for x in row[3].split(";") if x.strip()])
            lines.append(lineno)
    index = {lab: k for k, lab in enumerate(labels)}
    nbrs = []
    for lab, ids, lineno in zip(labels, raw, lines):
        for x in ids:
            if x not in index:
                raise DataValidationError(f"region {lab} lists unknown neighbor {x!r}", row=lineno)
        nbrs.append(tuple(index[x] for x in ids))
    adjacency_matrix(nbrs, len(labels), labels)
    return tuple(labels), np.array(coords, dtype=float).reshape(-1, 2), tuple(nbrs)


def _fmt(v: float) -> str:
    # repr of a Python float round-trips exactly
    return repr(float(v))


def write_panel_csv(dataset, path) -> None:
    """Write a panel in the ingestion schema; floats round-trip bit-exactly.

    ``path`` may also be an open text stream.
    """
    if hasattr(path, "write"):
        _write_panel(dataset, path)
        return
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        _write_panel(dataset, fh)


def _write_panel(dataset, fh) -> None:
    spatial = isinstance(dataset, SpatioPanelDataset)
    d = dataset.d
    keys = SPATIAL_KEYS if spatial else TEMPORAL_KEYS
    header = list(keys) + [f"state_{k + 1}" for k in range(d)]
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    for i, day in enumerate(dataset.day_labels):
        for t, tm in enumerate(dataset.time_labels):
            if spatial:
                for k, reg in enumerate(dataset.region_labels):
                    w.writerow(
                        [day, tm, reg, int(dataset.actions[i, t, k]), _fmt(dataset.outcomes[i, t, k])]
                        + [_fmt(v) for v in dataset.states[i, t, k]]
                    )
            else:
                w.writerow(
                    [day, tm, int(dataset.actions[i, t]), _fmt(dataset.outcomes[i, t])]
                    + [_fmt(v) for v in dataset.states[i, t]]
                )


def write_regions_csv(dataset: SpatioPanelDataset, path) -> None:
    """Write the region sidecar for a spatiotemporal panel."""
    path = Path(path)
    labels = dataset.region_labels
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "lon", "lat", "neighbors"])
        for k, lab in enumerate(labels):
            lon, lat = dataset.coords[k]
            w.writerow([lab, _fmt(lon), _fmt(lat), ";".join(labels[j] for j in dataset.neighbors[k])])
