"""Core data types: flow conditions, surface grids, dense/sparse cp datasets,
the min-max input scaler, area-weighted RMSE, section cuts and CSV I/O.

Datasets are stored column-wise as float64 arrays rather than lists of
point objects; :class:`SurfacePoint` and :class:`FieldSample` exist for
single-record access and for code that prefers a row view.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

FEATURE_NAMES = ("mach", "alpha", "x", "y", "z", "nx", "ny", "nz")
N_FEATURES = len(FEATURE_NAMES)

DENSE_HEADER = ("mach", "alpha", "x", "y", "z", "nx", "ny", "nz", "area_weight", "cp")
SPARSE_HEADER = DENSE_HEADER + ("section_id",)
PREDICTION_HEADER = ("mach", "alpha", "x", "y", "z", "cp_pred")
FUSED_HEADER = ("x", "y", "z", "cp_mean", "cp_var")


class DatasetError(ValueError):
    """Malformed dataset or inconsistent dataset content."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FlowCondition:
    mach: float
    alpha: float  # degrees

    def __post_init__(self):
        if not (math.isfinite(self.mach) and self.mach > 0):
            raise ValueError(f"mach must be positive and finite, got {self.mach}")
        if not math.isfinite(self.alpha):
            raise ValueError(f"alpha must be finite, got {self.alpha}")

    def as_tuple(self) -> tuple[float, float]:
        return (float(self.mach), float(self.alpha))


@dataclass(frozen=True)
class SurfacePoint:
    position: tuple[float, float, float]
    normal: tuple[float, float, float]
    area_weight: float = 0.0

    def __post_init__(self):
        if abs(math.sqrt(sum(c * c for c in self.normal)) - 1.0) > 1e-9:
            raise ValueError(f"normal must have unit length, got {self.normal}")
        if not self.area_weight >= 0:
            raise ValueError(f"area_weight must be >= 0, got {self.area_weight}")


@dataclass(frozen=True)
class FieldSample:
    condition: FlowCondition
    point: SurfacePoint
    cp: float

    def __post_init__(self):
        if not math.isfinite(self.cp):
            raise ValueError("cp must be finite")

    def features(self) -> np.ndarray:
        return np.array(
            [self.condition.mach, self.condition.alpha, *self.point.position, *self.point.normal],
            dtype=np.float64,
        )


@dataclass(frozen=True, eq=False)
class SurfaceGrid:
    """Ordered set of surface points stored as arrays.

    ``positions`` and ``normals`` have shape (N, 3), ``area_weights`` shape (N,).
    ``section_ids`` is optional and only used for sensor sets.
    """

    positions: np.ndarray
    normals: np.ndarray
    area_weights: np.ndarray
    section_ids: np.ndarray | None = None

    def __post_init__(self):
        pos = _frozen(self.positions).reshape(-1, 3)
        nrm = _frozen(self.normals).reshape(-1, 3)
        area = _frozen(self.area_weights).reshape(-1)
        if not (len(pos) == len(nrm) == len(area)):
            raise DatasetError("positions, normals and area_weights differ in length")
        if np.any(np.abs(np.linalg.norm(nrm, axis=1) - 1.0) > 1e-9):
            raise DatasetError("surface normals must have unit length")
        if np.any(area < 0):
            raise DatasetError("area weights must be non-negative")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(self, "area_weights", area)
        if self.section_ids is not None:
            ids = _frozen(self.section_ids, dtype=np.int64).reshape(-1)
            if len(ids) != len(pos):
                raise DatasetError("section_ids length does not match grid size")
            object.__setattr__(self, "section_ids", ids)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> SurfacePoint:
        return SurfacePoint(
            tuple(self.positions[i].tolist()),
            tuple(self.normals[i].tolist()),
            float(self.area_weights[i]),
        )

    def __iter__(self) -> Iterator[SurfacePoint]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "SurfaceGrid":
        idx = np.asarray(idx)
        ids = None if self.section_ids is None else self.section_ids[idx]
        return SurfaceGrid(self.positions[idx], self.normals[idx], self.area_weights[idx], ids)

    @classmethod
    def from_points(cls, points: Sequence[SurfacePoint]) -> "SurfaceGrid":
        return cls(
            [p.position for p in points],
            [p.normal for p in points],
            [p.area_weight for p in points],
        )


def _conditions_array(conditions) -> np.ndarray:
    rows = []
    for c in conditions:
        if isinstance(c, FlowCondition):
            rows.append(c.as_tuple())
        else:
            rows.append(FlowCondition(float(c[0]), float(c[1])).as_tuple())
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def grid_features(grid: SurfaceGrid, conditions) -> np.ndarray:
    """Raw 8-column feature matrix for every (condition, point) pair.

    Rows are ordered condition-major: all grid points of the first
    condition, then all grid points of the second, and so on.
    """
    conds = _conditions_array(conditions)
    n, npts = len(conds), len(grid)
    feats = np.empty((n * npts, N_FEATURES))
    feats[:, 0] = np.repeat(conds[:, 0], npts)
    feats[:, 1] = np.repeat(conds[:, 1], npts)
    feats[:, 2:5] = np.tile(grid.positions, (n, 1))
    feats[:, 5:8] = np.tile(grid.normals, (n, 1))
    return feats


@dataclass(frozen=True, eq=False)
class _FieldDataset:
    grid: SurfaceGrid
    conditions: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        conds = _conditions_array(self.conditions)
        vals = _frozen(self.values)
        if vals.ndim == 1:
            vals = vals.reshape(-1, 1)
        if vals.shape != (len(self.grid), len(conds)):
            raise DatasetError(
                f"values shape {vals.shape} does not match "
                f"({len(self.grid)} points, {len(conds)} conditions)"
            )
        if not np.all(np.isfinite(vals)):
            raise DatasetError("cp values must be finite")
        conds.setflags(write=False)
        object.__setattr__(self, "conditions", conds)
        object.__setattr__(self, "values", vals)

    @property
    def n_conditions(self) -> int:
        return len(self.conditions)

    def condition(self, j: int) -> FlowCondition:
        return FlowCondition(*self.conditions[j])

    def condition_list(self) -> list[FlowCondition]:
        return [self.condition(j) for j in range(self.n_conditions)]

    def index_of(self, condition) -> int:
        """Column index of a flow condition (exact match)."""
        c = condition.as_tuple() if isinstance(condition, FlowCondition) else tuple(condition)
        hits = np.flatnonzero((self.conditions[:, 0] == c[0]) & (self.conditions[:, 1] == c[1]))
        if len(hits) == 0:
            raise KeyError(f"condition {c} not in dataset")
        return int(hits[0])

    def features(self) -> np.ndarray:
        return grid_features(self.grid, self.conditions)

    def targets(self) -> np.ndarray:
        # condition-major to match features()
        return self.values.T.reshape(-1).copy()

    def samples(self) -> Iterator[FieldSample]:
        for j in range(self.n_conditions):
            cond = self.condition(j)
            for i in range(len(self.grid)):
                yield FieldSample(cond, self.grid[i], float(self.values[i, j]))


class DenseDataset(_FieldDataset):
    """cp snapshots on a fixed grid: ``values`` has shape (N points, n conditions)."""

    def select_conditions(self, cols) -> "DenseDataset":
        cols = np.asarray(cols, dtype=int)
        return DenseDataset(self.grid, self.conditions[cols], self.values[:, cols])


class SparseDataset(_FieldDataset):
    """cp at m sensors; the sensor grid carries one section id per sensor."""

    def __post_init__(self):
        super().__post_init__()
        if self.grid.section_ids is None:
            raise DatasetError("sparse dataset sensors need section ids")

    @property
    def sensors(self) -> SurfaceGrid:
        return self.grid

    @property
    def section_ids(self) -> np.ndarray:
        return self.grid.section_ids

    def select_conditions(self, cols) -> "SparseDataset":
        cols = np.asarray(cols, dtype=int)
        return SparseDataset(self.grid, self.conditions[cols], self.values[:, cols])

    def select_sensors(self, rows) -> "SparseDataset":
        rows = np.asarray(rows, dtype=int)
        return SparseDataset(self.grid.subset(rows), self.conditions, self.values[rows])


# --------------------------------------------------------------------------
# scaler


@dataclass(frozen=True, eq=False)
class MinMaxScaler:
    """Affine per-feature map of [min, max] onto [-0.5, 0.5].

    Zero-range features map to 0.0. Values outside the fitted range are
    extrapolated linearly, never clamped.
    """

    data_min: np.ndarray
    data_max: np.ndarray

    def __post_init__(self):
        lo, hi = _frozen(self.data_min).reshape(-1), _frozen(self.data_max).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("min and max must have the same length")
        if np.any(hi < lo):
            raise ValueError("scaler max must be >= min for every feature")
        object.__setattr__(self, "data_min", lo)
        object.__setattr__(self, "data_max", hi)

    @property
    def n_features(self) -> int:
        return len(self.data_min)

    @property
    def _range(self) -> np.ndarray:
        return self.data_max - self.data_min

    def transform(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        rng = self._range
        safe = np.where(rng > 0, rng, 1.0)
        out = (raw - self.data_min) / safe - 0.5
        return np.where(rng > 0, out, 0.0)

    def inverse_transform(self, scaled) -> np.ndarray:
        # zero-range features come back as their (single) fitted value
        scaled = np.asarray(scaled, dtype=np.float64)
        return np.where(self._range > 0, (scaled + 0.5) * self._range + self.data_min, self.data_min)

    def to_dict(self) -> dict:
        return {"min": self.data_min.tolist(), "max": self.data_max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxScaler":
        return cls(np.array(d["min"], dtype=np.float64), np.array(d["max"], dtype=np.float64))


def fit_scaler(samples) -> MinMaxScaler:
    """Fit a :class:`MinMaxScaler` to FieldSamples or an (n, 8) feature matrix."""
    if isinstance(samples, np.ndarray):
        feats = np.asarray(samples, dtype=np.float64)
    else:
        samples = list(samples)
        feats = np.array([s.features() for s in samples]) if samples else np.empty((0, N_FEATURES))
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise DatasetError("empty dataset")
    if not np.all(np.isfinite(feats)):
        raise DatasetError("non-finite feature")
    return MinMaxScaler(feats.min(axis=0), feats.max(axis=0))


# --------------------------------------------------------------------------
# metrics and cuts


def area_weighted_rmse(predicted, reference, weights) -> float:
    """sqrt(sum w (p - r)^2 / sum w)."""
    p = np.asarray(predicted, dtype=np.float64).reshape(-1)
    r = np.asarray(reference, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if not (len(p) == len(r) == len(w)) or len(p) == 0:
        raise ValueError("predicted, reference and weights must have equal non-zero length")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = math.fsum(w)
    if not total > 0:
        raise ValueError("total weight must be positive")
    return math.sqrt(math.fsum(w * (p - r) ** 2) / total)


def span_fraction(grid: SurfaceGrid) -> np.ndarray:
    """Spanwise coordinate y normalised to [0, 1] over the grid extent."""
    y = grid.positions[:, 1]
    lo, hi = y.min(), y.max()
    if hi == lo:
        return np.zeros_like(y)
    return (y - lo) / (hi - lo)


def section_cut(
    grid: SurfaceGrid,
    field,
    span: float,
    tolerance: float,
    side: str | None = None,
) -> np.ndarray:
    """Points whose span fraction lies within ``tolerance`` of ``span``.

    Returns an array of shape (k, 2) with columns (x, cp), sorted by the
    chordwise coordinate x (stable, so ties keep grid order). ``side`` may be
    ``"upper"`` (nz > 0) or ``"lower"`` (nz < 0) to restrict the cut to one
    surface; the default keeps both.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    field = np.asarray(field, dtype=np.float64).reshape(-1)
    if len(field) != len(grid):
        raise ValueError("field length does not match grid")
    mask = np.abs(span_fraction(grid) - span) <= tolerance
    if side == "upper":
        mask &= grid.normals[:, 2] > 0
    elif side == "lower":
        mask &= grid.normals[:, 2] < 0
    elif side is not None:
        raise ValueError(f"unknown side {side!r}")
    idx = np.flatnonzero(mask)
    x = grid.positions[idx, 0]
    order = np.argsort(x, kind="stable")
    return np.column_stack([x[order], field[idx][order]])


def total_variation(values) -> float:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    return float(np.sum(np.abs(np.diff(v))))


# --------------------------------------------------------------------------
# CSV I/O


def _fmt(v: float) -> str:
    return repr(float(v))


def write_dense_csv(dataset: DenseDataset, path) -> None:
    _write_field_csv(dataset, path, sparse=False)


def write_sparse_csv(dataset: SparseDataset, path) -> None:
    _write_field_csv(dataset, path, sparse=True)


def _write_field_csv(dataset, path, sparse: bool) -> None:
    g = dataset.grid
    header = SPARSE_HEADER if sparse else DENSE_HEADER
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for j, (mach, alpha) in enumerate(dataset.conditions):
            head = f"{_fmt(mach)},{_fmt(alpha)},"
            for i in range(len(g)):
                row = [*g.positions[i], *g.normals[i], g.area_weights[i], dataset.values[i, j]]
                line = head + ",".join(_fmt(v) for v in row)
                if sparse:
                    line += f",{int(g.section_ids[i])}"
                fh.write(line + "\n")


def _read_rows(path, header: Sequence[str]) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if tuple(h.strip() for h in got) != tuple(header):
            raise DatasetError(f"{path}: expected header {','.join(header)}, got {','.join(got)}")
        try:
            rows = [[float(v) for v in r] for r in reader if r]
        except ValueError as exc:
            raise DatasetError(f"{path}: {exc}") from None
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != len(header):
        raise DatasetError(f"{path}: ragged rows")
    return arr


def _split_by_condition(arr: np.ndarray, path):
    # conditions in first-appearance order, grid taken from the first block
    keys = [tuple(r) for r in arr[:, :2]]
    order: dict[tuple, list[int]] = {}
    for i, k in enumerate(keys):
        order.setdefault(k, []).append(i)
    blocks = list(order.values())
    size = len(blocks[0])
    if any(len(b) != size for b in blocks):
        raise DatasetError(f"{path}: conditions have differing point counts")
    first = arr[blocks[0]]
    for b in blocks[1:]:
        if not np.array_equal(arr[b][:, 2:8], first[:, 2:8]):
            raise DatasetError(f"{path}: grid differs between conditions")
    conds = np.array(list(order.keys()))
    values = np.column_stack([arr[b][:, 9] for b in blocks])
    return first, conds, values


def read_dense_csv(path) -> DenseDataset:
    arr = _read_rows(path, DENSE_HEADER)
    first, conds, values = _split_by_condition(arr, path)
    grid = SurfaceGrid(first[:, 2:5], first[:, 5:8], first[:, 8])
    return DenseDataset(grid, conds, values)


def read_sparse_csv(path) -> SparseDataset:
    arr = _read_rows(path, SPARSE_HEADER)
    first, conds, values = _split_by_condition(arr, path)
    grid = SurfaceGrid(first[:, 2:5], first[:, 5:8], first[:, 8], first[:, 10].astype(np.int64))
    return SparseDataset(grid, conds, values)


def write_prediction_csv(path, grid: SurfaceGrid, condition, cp) -> None:
    mach, alpha = condition.as_tuple() if isinstance(condition, FlowCondition) else condition
    cp = np.asarray(cp, dtype=np.float64).reshape(-1)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(PREDICTION_HEADER) + "\n")
        head = f"{_fmt(mach)},{_fmt(alpha)},"
        for p, v in zip(grid.positions, cp):
            fh.write(head + ",".join(_fmt(c) for c in (*p, v)) + "\n")


def read_prediction_csv(path) -> np.ndarray:
    """Return the (N, 6) array of a prediction CSV."""
    return _read_rows(path, PREDICTION_HEADER)


def write_fused_csv(path, grid: SurfaceGrid, mean, var) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(FUSED_HEADER) + "\n")
        for p, m, v in zip(grid.positions, np.ravel(mean), np.ravel(var)):
            fh.write(",".join(_fmt(c) for c in (*p, m, v)) + "\n")


def read_fused_csv(path) -> np.ndarray:
    return _read_rows(path, FUSED_HEADER)
