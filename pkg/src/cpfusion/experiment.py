"""End-to-end fusion experiment on the synthetic wing.

Pre-train on rigid dense data, take measurements from the deformed case,
and compare the base network, single-point and multi-point fine-tuning and
gappy POD against the deformed truth on held-out test conditions.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import gappy, synth
from .data import (
    SparseDataset,
    area_weighted_rmse,
    fit_scaler,
    section_cut,
    write_dense_csv,
    write_fused_csv,
    write_prediction_csv,
    write_sparse_csv,
)
from .mlp import TrainConfig, init_model, load_checkpoint, save_checkpoint, train
from .transfer import FinetuneConfig, Strategy, finetune, predict_field

METHODS = ("base", "sp", "mp", "gappy")


class ConfigError(ValueError):
    pass


def default_finetune_indices(n_conditions: int) -> list[int]:
    # two out of every five DoE points, spread over the Halton order
    return [i for i in range(n_conditions) if i % 5 in (0, 3)]


@dataclass
class ExperimentConfig:
    # case
    n_chord: int = 40
    n_span: int = 20
    twist_bias: float = 0.3
    shock_width: float = 0.03
    noise_sd: float = 0.0
    n_sections: int = 9
    n_chord_per_section: int = 14
    # design of experiments
    n_conditions: int = 60
    mach_range: tuple = (0.5, 0.9)
    alpha_range: tuple = (0.0, 10.0)
    transonic_boost: bool = True
    finetune_indices: list | None = None
    test_indices: list | None = None
    transonic_mach: float = 0.8
    # methods
    methods: tuple = METHODS
    base_checkpoint: str | None = None
    hidden_dim: int = 64
    num_hidden_layers: int = 9
    pretrain_lr: float = 1e-3
    pretrain_decay: float = 0.995
    pretrain_batch_size: int = 4096
    pretrain_epochs: int = 200
    pretrain_patience: int = 100
    validation_fraction: float = 0.2
    finetune_frozen_prefix: int = 2
    finetune_lr: float = 3e-5
    finetune_decay: float = 0.998
    finetune_patience: int = 30
    finetune_batch_size: int = 4096
    finetune_max_epochs: int = 2000
    gappy_energy: float = 0.999
    gappy_rank: int | None = None
    gappy_noise: float = 1e-6
    # evaluation
    cut_spans: tuple = (0.35, 0.9)
    cut_tolerance: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.mach_range = tuple(self.mach_range)
        self.alpha_range = tuple(self.alpha_range)
        self.cut_spans = tuple(self.cut_spans)
        self.methods = tuple(self.methods)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def resolved_indices(self) -> tuple[list[int], list[int]]:
        ft = list(self.finetune_indices) if self.finetune_indices is not None else default_finetune_indices(self.n_conditions)
        if self.test_indices is not None:
            te = list(self.test_indices)
        else:
            te = [i for i in range(self.n_conditions) if i not in set(ft)]
        return ft, te

    def validate(self) -> None:
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}; choose from {METHODS}")
        ft, te = self.resolved_indices()
        for name, idx in (("finetune", ft), ("test", te)):
            if any(not 0 <= i < self.n_conditions for i in idx):
                raise ConfigError(f"{name} index outside 0..{self.n_conditions - 1}")
            if len(set(idx)) != len(idx):
                raise ConfigError(f"duplicate {name} indices")
        if not te:
            raise ConfigError("no test conditions")
        if "mp" in self.methods:
            if not ft:
                raise ConfigError("multi-point fine-tuning needs fine-tune conditions")
            if set(ft) & set(te):
                raise ConfigError(f"fine-tune and test conditions overlap: {sorted(set(ft) & set(te))}")
        if self.base_checkpoint is not None and not Path(self.base_checkpoint).is_file():
            raise FileNotFoundError(f"base checkpoint not found: {self.base_checkpoint}")
        if not self.cut_spans or any(not 0 <= s <= 1 for s in self.cut_spans):
            raise ConfigError("cut spans must lie in [0, 1]")

    @property
    def tolerance(self) -> float:
        return self.cut_tolerance if self.cut_tolerance is not None else 0.5 / (self.n_span - 1)

    def case_params(self) -> synth.CaseParams:
        return synth.CaseParams(self.twist_bias, self.shock_width, self.noise_sd)

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(
            initial_lr=self.pretrain_lr,
            decay_factor=self.pretrain_decay,
            batch_size=self.pretrain_batch_size,
            max_epochs=self.pretrain_epochs,
            patience=self.pretrain_patience,
            validation_fraction=self.validation_fraction,
            rng_seed=self.seed,
        )

    def finetune_config(self, strategy) -> FinetuneConfig:
        return FinetuneConfig(
            frozen_prefix=self.finetune_frozen_prefix,
            initial_lr=self.finetune_lr,
            decay_factor=self.finetune_decay,
            patience=self.finetune_patience,
            strategy=strategy,
            batch_size=self.finetune_batch_size,
            max_epochs=self.finetune_max_epochs,
            validation_fraction=self.validation_fraction,
            rng_seed=self.seed,
        )


@dataclass
class ComparisonReport:
    """Per-condition and pooled RMSEs, section cuts and run metadata.

    ``data`` is the deterministic part written to ``report.json``;
    wall-clock timings live separately in ``timings``.
    """

    data: dict
    timings: dict = field(default_factory=dict)
    predictions: dict = field(default_factory=dict, repr=False)

    @property
    def methods(self) -> list[str]:
        return list(self.data["rmse"])

    def rmse(self, method: str, subset: str = "all") -> float:
        return self.data["rmse"][method][f"aggregate_{subset}"]

    def per_condition(self, method: str) -> list[float]:
        return self.data["rmse"][method]["per_condition"]

    def to_json(self) -> str:
        return json.dumps(self.data, indent=1, sort_keys=True) + "\n"

    def summary(self) -> str:
        conds = self.data["test_conditions"]
        methods = self.methods
        lines = ["condition".ljust(22) + "".join(m.rjust(12) for m in methods)]
        for k, (mach, alpha) in enumerate(conds):
            row = f"M={mach:.3f} a={alpha:5.2f}".ljust(22)
            row += "".join(f"{self.per_condition(m)[k]:12.3e}" for m in methods)
            lines.append(row)
        for subset in ("transonic", "subsonic", "all"):
            if all(self.rmse(m, subset) is not None for m in methods):
                lines.append(
                    f"pooled {subset}".ljust(22) + "".join(f"{self.rmse(m, subset):12.3e}" for m in methods)
                )
        return "\n".join(lines)


def pooled_rmse(fields_, truths, weights) -> float:
    """Area-weighted RMSE over the concatenation of several fields."""
    return area_weighted_rmse(
        np.concatenate(fields_), np.concatenate(truths), np.tile(weights, len(fields_))
    )


def holdout_sections(sparse: SparseDataset, held_out_ids) -> tuple[SparseDataset, SparseDataset]:
    """Split sensors by section id into (training, validation)."""
    held = [int(i) for i in held_out_ids]
    present = set(sparse.section_ids.tolist())
    missing = [i for i in held if i not in present]
    if missing:
        raise ValueError(f"unknown section ids {missing}")
    mask = np.isin(sparse.section_ids, held)
    return sparse.select_sensors(np.flatnonzero(~mask)), sparse.select_sensors(np.flatnonzero(mask))


@dataclass
class CaseData:
    grid: synth.PlanformGrid
    conditions: list
    rigid: object
    truth: object
    sensors: SparseDataset


def build_case(config: ExperimentConfig) -> CaseData:
    grid = synth.PlanformGrid(config.n_chord, config.n_span)
    params = config.case_params()
    conds = synth.generate_doe(config.n_conditions, config.mach_range, config.alpha_range, config.transonic_boost)
    rigid = synth.generate_dense(conds, grid, deformed=False, params=params)
    truth = synth.generate_dense(conds, grid, deformed=True, params=params)
    sensors = synth.extract_sensors(
        truth, config.n_sections, config.n_chord_per_section, noise_sd=config.noise_sd, seed=config.seed
    )
    return CaseData(grid, conds, rigid, truth, sensors)


def pretrain(dense, config: ExperimentConfig):
    x, y = dense.features(), dense.targets()
    model = init_model(fit_scaler(x), config.hidden_dim, config.num_hidden_layers, seed=config.seed)
    return train(model, x, y, config.pretrain_config())


def _cuts(grid, field_, spans, tol) -> dict:
    out = {}
    for s in spans:
        out[repr(float(s))] = {
            side: section_cut(grid, field_, s, tol, side=side).tolist() for side in ("upper", "lower")
        }
    return out


def run_experiment(config: ExperimentConfig, out_dir=None, log=None) -> ComparisonReport:
    """Run every configured method and score it against the deformed truth.

    With ``out_dir`` the datasets, checkpoints, per-method prediction CSVs,
    ``report.json`` and ``timings.json`` are written there.
    """
    config.validate()
    say = log or (lambda msg: None)
    ft_idx, te_idx = config.resolved_indices()
    timings: dict[str, float] = {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    case = build_case(config)
    grid = case.grid.surface
    weights = grid.area_weights
    test_conds = [case.conditions[i] for i in te_idx]
    timings["case"] = time.perf_counter() - t0

    meta: dict = {}
    needs_net = any(m in config.methods for m in ("base", "sp", "mp"))
    base = None
    if needs_net:
        t0 = time.perf_counter()
        if config.base_checkpoint is not None:
            base = load_checkpoint(config.base_checkpoint)
            meta["pretrain"] = {"checkpoint": str(config.base_checkpoint)}
        else:
            say(f"pre-training on {case.rigid.values.size} rigid samples")
            base, hist = pretrain(case.rigid, config)
            meta["pretrain"] = {
                "epochs_run": hist.epochs_run,
                "best_epoch": hist.best_epoch,
                "best_val_loss": hist.best_val_loss,
            }
        timings["pretrain"] = time.perf_counter() - t0
        meta["parameters"] = {
            "total": base.n_parameters(),
            "trainable_finetune": base.with_frozen_prefix(config.finetune_frozen_prefix).n_parameters(True),
        }

    preds: dict[str, list[np.ndarray]] = {}
    variances: list[np.ndarray] = []
    for method in config.methods:
        t0 = time.perf_counter()
        say(f"running {method}")
        if method == "base":
            preds[method] = [predict_field(base, grid, c) for c in test_conds]
        elif method == "mp":
            tuned, hist = finetune(base, case.sensors.select_conditions(ft_idx), config.finetune_config(Strategy.MULTI_POINT))
            meta["mp"] = {"epochs_run": hist.epochs_run, "best_epoch": hist.best_epoch,
                          "best_val_loss": hist.best_val_loss, "finetune_conditions": ft_idx}
            preds[method] = [predict_field(tuned, grid, c) for c in test_conds]
            if out is not None:
                save_checkpoint(tuned, out / "mp_model.json")
        elif method == "sp":
            cfg = config.finetune_config(Strategy.SINGLE_POINT)
            fields_, epochs = [], []
            for i, c in zip(te_idx, test_conds):
                tuned, hist = finetune(base, case.sensors.select_conditions([i]), cfg)
                epochs.append(hist.epochs_run)
                fields_.append(predict_field(tuned, grid, c))
            meta["sp"] = {"epochs_run": epochs}
            preds[method] = fields_
        elif method == "gappy":
            basis = gappy.build_pod(case.rigid, rank=config.gappy_rank, energy=config.gappy_energy)
            fields_, thetas = [], []
            for i in te_idx:
                res = gappy.gappy_fuse(case.rigid, case.sensors, i, noise=config.gappy_noise, basis=basis,
                                       seed=config.seed)
                fields_.append(res.mean)
                variances.append(res.variance)
                thetas.append(res.gpr.theta.tolist())
            meta["gappy"] = {"rank": basis.rank, "energy": basis.energy(), "theta": thetas}
            preds[method] = fields_
        timings[method] = time.perf_counter() - t0

    truths = [case.truth.values[:, i] for i in te_idx]
    transonic = [k for k, c in enumerate(test_conds) if c.mach >= config.transonic_mach]
    subsonic = [k for k in range(len(test_conds)) if k not in set(transonic)]
    rmse = {}
    for method, flds in preds.items():
        entry = {"per_condition": [area_weighted_rmse(f, t, weights) for f, t in zip(flds, truths)]}
        entry["aggregate_all"] = pooled_rmse(flds, truths, weights)
        for name, ks in (("transonic", transonic), ("subsonic", subsonic)):
            entry[f"aggregate_{name}"] = (
                pooled_rmse([flds[k] for k in ks], [truths[k] for k in ks], weights) if ks else None
            )
        rmse[method] = entry

    cuts = []
    for k, c in enumerate(test_conds):
        item = {"condition": list(c.as_tuple()), "truth": _cuts(grid, truths[k], config.cut_spans, config.tolerance)}
        for method, flds in preds.items():
            item[method] = _cuts(grid, flds[k], config.cut_spans, config.tolerance)
        cuts.append(item)

    report = ComparisonReport(
        data={
            "config": config.to_dict(),
            "test_indices": te_idx,
            "finetune_indices": ft_idx,
            "test_conditions": [list(c.as_tuple()) for c in test_conds],
            "transonic_test_indices": transonic,
            "rmse": rmse,
            "cuts": cuts,
            "runs": meta,
        },
        timings=timings,
        predictions=preds,
    )
    if out is not None:
        _write_outputs(out, config, report, case, te_idx, base, variances)
    return report


def _write_outputs(out: Path, config: ExperimentConfig, report: ComparisonReport, case: CaseData, te_idx, base,
                   variances) -> None:
    grid = case.grid.surface
    write_dense_csv(case.rigid, out / "rigid.csv")
    write_dense_csv(case.truth.select_conditions(te_idx), out / "truth_test.csv")
    write_sparse_csv(case.sensors, out / "sensors.csv")
    synth.write_case_config(
        out / "case_config.json",
        synth.case_config(case.grid, config.case_params(), doe=[list(c.as_tuple()) for c in case.conditions],
                          seed=config.seed),
    )
    if base is not None and config.base_checkpoint is None:
        save_checkpoint(base, out / "base_model.json")
    for method, flds in report.predictions.items():
        d = out / "predictions" / method
        d.mkdir(parents=True, exist_ok=True)
        for i, f in zip(te_idx, flds):
            write_prediction_csv(d / f"cond_{i:03d}.csv", grid, case.conditions[i], f)
    if variances:
        d = out / "predictions" / "gappy_fused"
        d.mkdir(parents=True, exist_ok=True)
        for i, m, v in zip(te_idx, report.predictions["gappy"], variances):
            write_fused_csv(d / f"cond_{i:03d}.csv", grid, m, v)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "timings.json").write_text(json.dumps(report.timings, indent=1, sort_keys=True) + "\n", encoding="utf-8")
