"""Analytic wing-like test case standing in for CFD and wind-tunnel data.

A trapezoidal planform carries a closed-form cp distribution with a
Mach/alpha-controlled shock on the upper surface. The *rigid* variant is
the simulation-like data used for pre-training; the *deformed* variant
washes out the local angle of attack towards the tip (bending/twist) and
plays the role of the truth from which measurements are taken.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import DenseDataset, FlowCondition, SparseDataset, SurfaceGrid, span_fraction

UPPER, LOWER = 1, -1

# planform: chord(s) = ROOT_CHORD - TAPER * s, leading edge at LE_SWEEP * s
ROOT_CHORD = 1.0
TAPER = 0.5
LE_SWEEP = 0.6


@dataclass(frozen=True)
class CaseParams:
    twist_bias: float = 0.3
    shock_width: float = 0.03
    noise_sd: float = 0.0

    def __post_init__(self):
        if not self.shock_width > 0:
            raise ValueError("shock_width must be positive")
        if not 0 <= self.twist_bias < 1:
            raise ValueError("twist_bias must lie in [0, 1)")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")


@dataclass(frozen=True, eq=False)
class PlanformGrid:
    """Structured grid on both sides of the planform.

    Points are ordered side-major (upper first), then span row, then chord.
    ``chord_frac`` and ``span_frac`` hold the parametric coordinates of each
    point and ``side`` is +1 (upper) or -1 (lower).
    """

    n_chord: int = 40
    n_span: int = 20

    def __post_init__(self):
        if self.n_chord < 2 or self.n_span < 2:
            raise ValueError("need at least 2 points per direction")
        xc = np.linspace(0.0, 1.0, self.n_chord)
        s = np.linspace(0.0, 1.0, self.n_span)
        S, XC = np.meshgrid(s, xc, indexing="ij")  # (n_span, n_chord)
        node_area = _node_areas(xc, s)
        chord, span, side, area = [], [], [], []
        for sd in (UPPER, LOWER):
            chord.append(XC.ravel())
            span.append(S.ravel())
            side.append(np.full(XC.size, sd))
            area.append(node_area.ravel())
        for name, val in [
            ("chord_frac", np.concatenate(chord)),
            ("span_frac", np.concatenate(span)),
            ("side", np.concatenate(side)),
        ]:
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        xcf, sf = self.chord_frac, self.span_frac
        x = LE_SWEEP * sf + xcf * (ROOT_CHORD - TAPER * sf)
        pos = np.column_stack([x, sf, np.zeros_like(x)])
        nrm = np.zeros_like(pos)
        nrm[:, 2] = self.side
        object.__setattr__(self, "surface", SurfaceGrid(pos, nrm, np.concatenate(area)))

    def __len__(self) -> int:
        return len(self.chord_frac)

    @property
    def planform_area(self) -> float:
        return ROOT_CHORD - 0.5 * TAPER


def _node_areas(xc: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Quarter of every adjacent cell's area assigned to each node.

    Cells are trapezoids in physical space: their area is
    dxc * ds * mean chord over the span interval (exact, since the chord is
    linear in s).
    """
    dxc = np.diff(xc)
    ds = np.diff(s)
    mean_chord = ROOT_CHORD - TAPER * 0.5 * (s[:-1] + s[1:])
    cell = (ds * mean_chord)[:, None] * dxc[None, :]  # (n_span-1, n_chord-1)
    node = np.zeros((len(s), len(xc)))
    q = cell / 4.0
    node[:-1, :-1] += q
    node[1:, :-1] += q
    node[:-1, 1:] += q
    node[1:, 1:] += q
    return node


def analytic_cp(x_c, s, side, mach, alpha, deformed: bool = False, params: CaseParams = CaseParams()):
    """Closed-form cp; broadcasts over array arguments.

    ``side`` is +1 for the upper surface and -1 for the lower one.
    """
    x_c = np.asarray(x_c, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    side = np.asarray(side)
    mach = np.asarray(mach, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    a_eff = alpha * (1.0 - params.twist_bias * s**2) if deformed else alpha * np.ones_like(s)
    x_sh = np.clip(0.2 + 1.5 * (mach - 0.6) + 0.02 * a_eff, 0.05, 0.95)
    suction = 0.2 + 0.08 * a_eff
    strength = 4.0 * np.maximum(0.0, mach - 0.72)
    shock = 1.0 + 0.5 * strength * (1.0 - np.tanh((x_c - x_sh) / params.shock_width))
    upper = -suction * (1.0 - x_c) * shock + 0.1 * x_c
    lower = 0.15 * (1.0 - x_c) - 0.02 * a_eff * (1.0 - x_c)
    out = np.where(side > 0, upper, lower)
    return out[()] if out.ndim == 0 else out


def halton(index: int, base: int) -> float:
    """Radical inverse of ``index`` (>= 1) in ``base``."""
    if index < 1:
        raise ValueError("halton index starts at 1")
    if base < 2 or any(base % p == 0 for p in range(2, int(math.isqrt(base)) + 1)):
        raise ValueError(f"base must be prime, got {base}")
    result, f, i = 0.0, 1.0, index
    while i > 0:
        f /= base
        result += f * (i % base)
        i //= base
    return result


def generate_doe(
    num_samples: int,
    mach_range=(0.5, 0.9),
    alpha_range=(0.0, 10.0),
    transonic_boost: bool = True,
    boost_fraction: float = 0.4,
    boost_range=(0.8, 0.9),
) -> list[FlowCondition]:
    """Halton design over (Mach, alpha) using bases 2 and 3.

    With ``transonic_boost`` the Mach coordinate of the last
    ``boost_fraction`` of the points is mapped into ``boost_range`` instead.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    n_boost = int(math.floor(boost_fraction * num_samples)) if transonic_boost else 0
    out = []
    for i in range(1, num_samples + 1):
        hm, ha = halton(i, 2), halton(i, 3)
        lo, hi = boost_range if i > num_samples - n_boost else mach_range
        out.append(FlowCondition(lo + (hi - lo) * hm, alpha_range[0] + (alpha_range[1] - alpha_range[0]) * ha))
    return out


def generate_dense(conditions, grid: PlanformGrid, deformed: bool = False, params: CaseParams = CaseParams()) -> DenseDataset:
    conds = [c if isinstance(c, FlowCondition) else FlowCondition(*c) for c in conditions]
    cols = [
        analytic_cp(grid.chord_frac, grid.span_frac, grid.side, c.mach, c.alpha, deformed, params)
        for c in conds
    ]
    return DenseDataset(grid.surface, conds, np.column_stack(cols))


def sensor_indices(grid: SurfaceGrid, n_sections: int = 9, n_chord_per_section: int = 14):
    """Grid indices and 1-based section ids of the sensor layout.

    For each surface side and each section station (k + 0.5)/n_sections the
    nearest span row is chosen; within it, the points nearest to the chord
    stations (j + 0.5)/n_chord_per_section in local chord fraction.
    """
    span = span_fraction(grid)
    x = grid.positions[:, 0]
    sides = np.sign(grid.normals[:, 2])
    idx, ids = [], []
    for sd in (1.0, -1.0):
        on_side = np.flatnonzero(sides == sd)
        if len(on_side) == 0:
            continue
        rows = np.unique(span[on_side])
        for k in range(n_sections):
            station = (k + 0.5) / n_sections
            row_s = rows[np.argmin(np.abs(rows - station))]
            row = on_side[span[on_side] == row_s]
            xr = x[row]
            width = xr.max() - xr.min()
            local = (xr - xr.min()) / width if width > 0 else np.zeros_like(xr)
            for j in range(n_chord_per_section):
                target = (j + 0.5) / n_chord_per_section
                idx.append(int(row[np.argmin(np.abs(local - target))]))
                ids.append(k + 1)
    return np.array(idx, dtype=np.int64), np.array(ids, dtype=np.int64)


def extract_sensors(
    dense: DenseDataset,
    n_sections: int = 9,
    n_chord_per_section: int = 14,
    noise_sd: float = 0.0,
    seed: int = 0,
) -> SparseDataset:
    """Sample a dense dataset at the sensor layout, optionally with noise."""
    idx, ids = sensor_indices(dense.grid, n_sections, n_chord_per_section)
    g = dense.grid
    sensors = SurfaceGrid(g.positions[idx], g.normals[idx], g.area_weights[idx], ids)
    values = dense.values[idx].copy()
    if noise_sd > 0:
        values = values + np.random.default_rng(seed).normal(0.0, noise_sd, size=values.shape)
    return SparseDataset(sensors, dense.conditions, values)


def is_transonic(condition, threshold: float = 0.8) -> bool:
    mach = condition.mach if isinstance(condition, FlowCondition) else condition[0]
    return mach >= threshold


def case_config(grid: PlanformGrid, params: CaseParams, **extra) -> dict:
    """Provenance record of every constant behind a generated case."""
    return {
        "planform": {"root_chord": ROOT_CHORD, "taper": TAPER, "le_sweep": LE_SWEEP},
        "grid": {"n_chord": grid.n_chord, "n_span": grid.n_span},
        "params": asdict(params),
        "cp_model": {
            "shock_position": "clip(0.2 + 1.5*(M - 0.6) + 0.02*alpha_e, 0.05, 0.95)",
            "suction": "0.2 + 0.08*alpha_e",
            "shock_strength": "4*max(0, M - 0.72)",
            "upper": "-P*(1-xc)*(1 + 0.5*S*(1 - tanh((xc - x_sh)/w))) + 0.1*xc",
            "lower": "0.15*(1-xc) - 0.02*alpha_e*(1-xc)",
            "alpha_e_deformed": "alpha*(1 - twist_bias*s^2)",
        },
        **extra,
    }


def write_case_config(path, config: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
