"""Bayesian hyperparameter search with a Gaussian process surrogate.

A seeded Latin-hypercube design is evaluated first; every later trial
maximises expected improvement under an RBF Gaussian process fitted to the
standardised objectives seen so far. Points live in the unit cube
internally and are decoded (with rounding for integer and categorical
parameters) before the objective is called.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm, qmc

from . import gappy

SURROGATE_NOISE = 1e-6


@dataclass(frozen=True)
class Param:
    """One search dimension: a float or integer range, or a list of choices."""

    name: str
    low: float | None = None
    high: float | None = None
    scale: str = "linear"
    integer: bool = False
    choices: tuple | None = None

    def __post_init__(self):
        if self.choices is not None:
            if len(self.choices) == 0:
                raise ValueError(f"{self.name}: empty choice list")
            object.__setattr__(self, "choices", tuple(self.choices))
            return
        if self.low is None or self.high is None or not self.low <= self.high:
            raise ValueError(f"{self.name}: bounds must satisfy low <= high")
        if self.scale not in ("linear", "log"):
            raise ValueError(f"{self.name}: scale must be 'linear' or 'log'")
        if self.scale == "log" and self.low <= 0:
            raise ValueError(f"{self.name}: log scale needs positive bounds")

    def decode(self, u: float):
        u = min(max(float(u), 0.0), 1.0)
        if self.choices is not None:
            return self.choices[min(int(u * len(self.choices)), len(self.choices) - 1)]
        if self.scale == "log":
            lo, hi = math.log10(self.low), math.log10(self.high)
            v = 10.0 ** (lo + u * (hi - lo))
        else:
            v = self.low + u * (self.high - self.low)
        v = min(max(v, self.low), self.high)
        return int(round(v)) if self.integer else v

    def encode(self, value) -> float:
        if self.choices is not None:
            return (self.choices.index(value) + 0.5) / len(self.choices)
        if self.high == self.low:
            return 0.5
        if self.scale == "log":
            lo, hi = math.log10(self.low), math.log10(self.high)
            return (math.log10(value) - lo) / (hi - lo)
        return (value - self.low) / (self.high - self.low)

    def to_dict(self) -> dict:
        if self.choices is not None:
            return {"name": self.name, "choices": list(self.choices)}
        return {"name": self.name, "low": self.low, "high": self.high, "scale": self.scale, "integer": self.integer}


@dataclass(frozen=True)
class SearchSpace:
    params: tuple

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        names = [p.name for p in self.params]
        if not names or len(set(names)) != len(names):
            raise ValueError("search space needs distinct parameter names")

    @property
    def dim(self) -> int:
        return len(self.params)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    def decode(self, u) -> dict:
        return {p.name: p.decode(x) for p, x in zip(self.params, u)}

    def encode(self, point: dict) -> np.ndarray:
        return np.array([p.encode(point[p.name]) for p in self.params])

    def contains(self, point: dict) -> bool:
        for p in self.params:
            v = point[p.name]
            if p.choices is not None:
                if v not in p.choices:
                    return False
            elif not p.low <= v <= p.high or (p.integer and v != int(v)):
                return False
        return True

    def to_dict(self) -> dict:
        return {"params": [p.to_dict() for p in self.params]}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        try:
            return cls(tuple(Param(**p) for p in d["params"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed search space: {exc}") from None


def pretrain_space() -> SearchSpace:
    return SearchSpace((
        Param("initial_lr", 1e-5, 1e-2, "log"),
        Param("hidden_dim", choices=(16, 32, 64, 128)),
        Param("num_hidden_layers", 2, 12, integer=True),
        Param("decay_factor", 0.98, 1.0),
    ))


def finetune_space(n_layers: int) -> SearchSpace:
    return SearchSpace((
        Param("initial_lr", 1e-5, 1e-2, "log"),
        Param("decay_factor", 0.98, 1.0),
        Param("frozen_prefix", 0, n_layers, integer=True),
    ))


@dataclass
class TrialRecord:
    index: int
    point: dict
    objective: float
    wall_time: float
    status: str = "ok"
    error: str | None = None

    def to_dict(self) -> dict:
        # JSON has no infinity; diverged trials are written with a null objective
        obj = self.objective if math.isfinite(self.objective) else None
        return {"index": self.index, "point": self.point, "objective": obj,
                "wall_time": self.wall_time, "status": self.status, "error": self.error}

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        obj = math.inf if d["objective"] is None else float(d["objective"])
        return cls(d["index"], d["point"], obj, d["wall_time"], d["status"], d.get("error"))


@dataclass
class SearchResult:
    best_point: dict | None
    best_objective: float
    trials: list = field(default_factory=list)

    def __iter__(self):
        # allows ``best, trials = optimize(...)``
        return iter((self.best_point, self.trials))

    def incumbent_trace(self) -> list[float]:
        return incumbent_trace(self.trials)


def incumbent_trace(trials) -> list[float]:
    out, best = [], math.inf
    for t in trials:
        if t.status == "ok" and t.objective < best:
            best = t.objective
        out.append(best)
    return out


def read_trial_log(path) -> list[TrialRecord]:
    with open(path, encoding="utf-8") as fh:
        return [TrialRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def standardize(objectives) -> np.ndarray:
    """Zero-mean, unit-variance objectives; +inf becomes worst finite + 3 std."""
    f = np.asarray(objectives, dtype=np.float64)
    ok = np.isfinite(f)
    if not ok.any():
        return np.zeros_like(f)
    sd = float(np.std(f[ok])) if ok.sum() > 1 else 0.0
    f = np.where(ok, f, f[ok].max() + 3.0 * (sd if sd > 0 else 1.0))
    mu, sd = f.mean(), f.std()
    return (f - mu) / (sd if sd > 0 else 1.0)


def expected_improvement(mean, sd, best: float, xi: float = 0.01) -> np.ndarray:
    """EI for minimisation."""
    mean, sd = np.asarray(mean, dtype=np.float64), np.asarray(sd, dtype=np.float64)
    imp = best - mean - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, imp / sd, 0.0)
    return np.where(sd > 0, imp * norm.cdf(z) + sd * norm.pdf(z), np.maximum(imp, 0.0))


def _propose(space, U, z, rng, n_candidates, xi, seen):
    try:
        gp = gappy.fit_gp(U, z, noise=SURROGATE_NOISE, n_starts=4, seed=int(rng.integers(2**31)), linear=False)
    except np.linalg.LinAlgError:
        return rng.uniform(size=space.dim)
    best = float(z.min())

    def ei(x):
        mean, var = gp.posterior(np.atleast_2d(x))
        return expected_improvement(mean, np.sqrt(np.maximum(var, 0.0)), best, xi)

    cand = rng.uniform(size=(n_candidates, space.dim))
    scores = ei(cand)
    order = np.argsort(-scores, kind="stable")
    start = cand[order[0]]
    res = minimize(lambda x: -float(ei(x)[0]), start, method="L-BFGS-B", bounds=[(0.0, 1.0)] * space.dim)
    options = [res.x] if res.success and -res.fun >= scores[order[0]] else []
    options += [cand[i] for i in order]
    for u in options:
        if _key(space.decode(u)) not in seen:
            return np.asarray(u)
    return rng.uniform(size=space.dim)


def _key(point: dict) -> str:
    return json.dumps(point, sort_keys=True)


def optimize(
    space: SearchSpace,
    objective: Callable[[dict], float],
    n_initial: int = 36,
    n_trials: int = 100,
    seed: int = 0,
    log_path=None,
    n_candidates: int = 1024,
    xi: float = 0.01,
) -> SearchResult:
    """Minimise ``objective`` over ``space``.

    A callback that raises or returns a non-finite value is recorded as a
    diverged trial with objective ``+inf`` and the search continues. With
    ``log_path`` a fresh JSON-lines log is started and one record is
    appended per finished trial.
    """
    if not 1 <= n_initial <= n_trials:
        raise ValueError("need 1 <= n_initial <= n_trials")
    rng = np.random.default_rng(seed)
    design = qmc.LatinHypercube(d=space.dim, seed=rng).random(n_initial)
    log = Path(log_path) if log_path is not None else None
    if log is not None:
        log.parent.mkdir(parents=True, exist_ok=True)
        log.write_text("", encoding="utf-8")
    trials: list[TrialRecord] = []
    U: list[np.ndarray] = []
    seen: set[str] = set()
    for k in range(n_trials):
        if k < n_initial:
            u = design[k]
        else:
            u = _propose(space, np.array(U), standardize([t.objective for t in trials]), rng, n_candidates, xi, seen)
        point = space.decode(u)
        seen.add(_key(point))
        U.append(space.encode(point))
        t0 = time.perf_counter()
        try:
            value = float(objective(dict(point)))
            status, err = ("ok", None) if math.isfinite(value) else ("diverged", f"non-finite objective {value}")
        except Exception as exc:  # noqa: BLE001 - any callback failure counts as divergence
            status, err = "diverged", f"{type(exc).__name__}: {exc}"
        rec = TrialRecord(k, point, value if status == "ok" else math.inf, time.perf_counter() - t0, status, err)
        trials.append(rec)
        if log is not None:
            with log.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        return SearchResult(None, math.inf, trials)
    best = min(ok, key=lambda t: t.objective)
    return SearchResult(best.point, best.objective, trials)


# --------------------------------------------------------------------------
# objectives for the two training stages


def pretrain_objective(features, targets, base_config, seed: int = 0):
    """Objective returning the best validation loss of a fresh network."""
    from dataclasses import replace

    from .data import fit_scaler
    from .mlp import init_model, train

    scaler = fit_scaler(features)

    def f(point: dict) -> float:
        model = init_model(scaler, int(point.get("hidden_dim", 64)), int(point.get("num_hidden_layers", 9)), seed=seed)
        cfg = replace(base_config, **{k: point[k] for k in ("initial_lr", "decay_factor") if k in point})
        _, hist = train(model, features, targets, cfg)
        return hist.best_val_loss if hist.best_val_loss is not None else hist.train_loss[-1]

    return f


def finetune_objective(base_model, measurements, base_config):
    """Objective returning the best validation loss after fine-tuning."""
    from dataclasses import replace

    from .transfer import finetune

    def f(point: dict) -> float:
        cfg = replace(base_config, **{k: point[k] for k in ("initial_lr", "decay_factor", "frozen_prefix") if k in point})
        _, hist = finetune(base_model, measurements, cfg)
        return hist.best_val_loss if hist.best_val_loss is not None else hist.train_loss[-1]

    return f
