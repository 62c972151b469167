"""Command-line front end.

Every subcommand takes ``--out DIR`` and writes only there, including an
appended provenance record in ``DIR/run_log.jsonl``. JSON config files
supply defaults; explicit flags override them. Exit codes: 0 success,
1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import experiment, gappy, hyperopt, synth
from .data import (
    FlowCondition,
    fit_scaler,
    read_dense_csv,
    read_sparse_csv,
    write_dense_csv,
    write_fused_csv,
    write_prediction_csv,
    write_sparse_csv,
)
from .mlp import TrainConfig, init_model, load_checkpoint, mse, save_checkpoint, train
from .transfer import FinetuneConfig, Strategy, finetune, predict_field

DEFAULT_SEED = 0
RUN_LOG = "run_log.jsonl"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# helpers


def _load_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    with p.open(encoding="utf-8") as fh:
        d = json.load(fh)
    if not isinstance(d, dict):
        raise ValueError(f"{p}: config must be a JSON object")
    return d


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _merge(config: dict, **overrides) -> dict:
    out = dict(config)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _pick(cls, d: dict, prefix: str = ""):
    names = {f.name for f in fields(cls)}
    return cls(**{k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix) and k[len(prefix):] in names})


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _provenance(out: Path, command: str, argv, config: dict, seed: int, inputs=()) -> None:
    artifacts = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != RUN_LOG:
            artifacts[str(p.relative_to(out))] = _sha256(p)
    record = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "artifacts": artifacts,
    }
    with (out / RUN_LOG).open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True, default=str) + "\n")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _history_dict(h) -> dict:
    return asdict(h) | {"epochs_run": h.epochs_run}


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_case(args, cfg: dict, out: Path):
    cfg = _merge(cfg, seed=args.seed)
    ec = experiment.ExperimentConfig.from_dict(cfg)
    case = experiment.build_case(ec)
    write_dense_csv(case.rigid, out / "rigid.csv")
    write_dense_csv(case.truth, out / "deformed.csv")
    write_sparse_csv(case.sensors, out / "sensors.csv")
    synth.write_case_config(
        out / "case_config.json",
        synth.case_config(case.grid, ec.case_params(), doe=[list(c.as_tuple()) for c in case.conditions], seed=ec.seed),
    )
    _say(f"wrote {len(case.conditions)} conditions on {len(case.grid)} points, {len(case.sensors.grid)} sensors")
    return ec.to_dict(), ec.seed, []


def cmd_pretrain(args, cfg: dict, out: Path):
    data_path = _require(args.data or cfg.get("data", ""), "dataset")
    cfg = _merge(cfg, seed=args.seed, hidden_dim=args.hidden_dim, num_hidden_layers=args.layers,
                 max_epochs=args.epochs, initial_lr=args.lr, decay_factor=args.decay, batch_size=args.batch_size)
    seed = cfg.get("seed", DEFAULT_SEED)
    tc = replace(_pick(TrainConfig, cfg), rng_seed=seed)
    dense = read_dense_csv(data_path)
    x, y = dense.features(), dense.targets()
    model = init_model(fit_scaler(x), cfg.get("hidden_dim", 64), cfg.get("num_hidden_layers", 9), seed=seed)
    _say(f"pre-training on {len(y)} rows")
    model, hist = train(model, x, y, tc)
    save_checkpoint(model, out / "model.json")
    _write_json(out / "history.json", _history_dict(hist))
    _say(f"best epoch {hist.best_epoch} of {hist.epochs_run}, validation loss {hist.best_val_loss}")
    resolved = asdict(tc) | {"hidden_dim": model.hidden_dim, "num_hidden_layers": model.num_hidden_layers}
    return resolved | {"data": str(data_path)}, seed, [data_path]


def cmd_finetune(args, cfg: dict, out: Path):
    ckpt = _require(args.checkpoint or cfg.get("checkpoint", ""), "checkpoint")
    data_path = _require(args.data or cfg.get("data", ""), "sensor dataset")
    cfg = _merge(cfg, seed=args.seed, strategy=args.strategy, frozen_prefix=args.frozen_prefix,
                 max_epochs=args.epochs, initial_lr=args.lr, sections=args.sections, condition=args.condition)
    seed = cfg.get("seed", DEFAULT_SEED)
    fc = replace(_pick(FinetuneConfig, cfg), rng_seed=seed)
    base = load_checkpoint(ckpt)
    sparse = read_sparse_csv(data_path)
    if fc.strategy is Strategy.SINGLE_POINT:
        if cfg.get("condition") is None:
            if sparse.n_conditions != 1:
                raise ValueError("single-point fine-tuning needs --condition when the dataset has several")
            cfg["condition"] = 0
        sparse = sparse.select_conditions([int(cfg["condition"])])
    held = None
    if cfg.get("sections"):
        sparse, held = experiment.holdout_sections(sparse, cfg["sections"])
    model, hist = finetune(base, sparse, fc)
    save_checkpoint(model, out / "model.json")
    summary = _history_dict(hist)
    if held is not None and len(held.grid):
        summary["heldout_sections"] = list(cfg["sections"])
        summary["heldout_rmse"] = float(np.sqrt(mse(model, held.features(), held.targets())))
        _say(f"held-out sections {cfg['sections']}: RMSE {summary['heldout_rmse']:.4e}")
    _write_json(out / "history.json", summary)
    _say(f"fine-tuned for {hist.epochs_run} epochs")
    resolved = asdict(fc) | {"strategy": fc.strategy.value, "condition": cfg.get("condition"),
                             "sections": cfg.get("sections")}
    return resolved | {"checkpoint": str(ckpt), "data": str(data_path)}, seed, [ckpt, data_path]


def _conditions(args, cfg):
    if args.mach is not None or args.alpha is not None:
        if args.mach is None or args.alpha is None:
            raise UsageError("--mach and --alpha go together")
        return [FlowCondition(args.mach, args.alpha)]
    if cfg.get("conditions"):
        return [FlowCondition(*c) for c in cfg["conditions"]]
    return None


def cmd_predict(args, cfg: dict, out: Path):
    ckpt = _require(args.checkpoint or cfg.get("checkpoint", ""), "checkpoint")
    grid_path = _require(args.grid or cfg.get("grid", ""), "grid dataset")
    model = load_checkpoint(ckpt)
    dense = read_dense_csv(grid_path)
    conds = _conditions(args, cfg) or dense.condition_list
    for k, c in enumerate(conds):
        write_prediction_csv(out / f"pred_{k:03d}.csv", dense.grid, c, predict_field(model, dense.grid, c))
    _say(f"predicted {len(conds)} condition(s) on {len(dense.grid)} points")
    cfg = cfg | {"conditions": [list(c.as_tuple()) for c in conds]}
    return cfg | {"checkpoint": str(ckpt), "grid": str(grid_path)}, cfg.get("seed", DEFAULT_SEED), [ckpt, grid_path]


def cmd_gpod(args, cfg: dict, out: Path):
    dense_path = _require(args.dense or cfg.get("dense", ""), "dense dataset")
    sparse_path = _require(args.sparse or cfg.get("sparse", ""), "sensor dataset")
    cfg = _merge(cfg, seed=args.seed, rank=args.rank, energy=args.energy, noise=args.noise, condition=args.condition)
    if args.rank is not None:
        cfg.pop("energy", None)
    seed = cfg.get("seed", DEFAULT_SEED)
    dense, sparse = read_dense_csv(dense_path), read_sparse_csv(sparse_path)
    basis = gappy.build_pod(dense, rank=cfg.get("rank"), energy=cfg.get("energy", 0.999))
    cols = [int(cfg["condition"])] if cfg.get("condition") is not None else range(sparse.n_conditions)
    diags = []
    for j in cols:
        res = gappy.gappy_fuse(dense, sparse, j, noise=cfg.get("noise", 1e-6), basis=basis, seed=seed)
        write_fused_csv(out / f"fused_{j:03d}.csv", dense.grid, res.mean, res.variance)
        diags.append({"condition": list(sparse.condition(j).as_tuple())} | res.diagnostics())
    _write_json(out / "diagnostics.json", diags)
    _say(f"rank {basis.rank} ({basis.energy():.6f} of the energy), {len(diags)} condition(s) fused")
    cfg = cfg | {"rank": basis.rank, "energy": cfg.get("energy"), "noise": cfg.get("noise", 1e-6), "seed": seed}
    return cfg | {"dense": str(dense_path), "sparse": str(sparse_path)}, seed, [dense_path, sparse_path]


def cmd_hyperopt(args, cfg: dict, out: Path):
    cfg = _merge(cfg, seed=args.seed, stage=args.stage, n_initial=args.n_initial, n_trials=args.n_trials,
                 max_epochs=args.epochs)
    stage = cfg.get("stage", "pretrain")
    seed = cfg.get("seed", DEFAULT_SEED)
    data_path = _require(args.data or cfg.get("data", ""), "dataset")
    inputs = [data_path]
    if stage == "pretrain":
        dense = read_dense_csv(data_path)
        space = hyperopt.pretrain_space()
        tc = replace(_pick(TrainConfig, cfg), rng_seed=seed)
        objective = hyperopt.pretrain_objective(dense.features(), dense.targets(), tc, seed=seed)
    elif stage == "finetune":
        ckpt = _require(args.checkpoint or cfg.get("checkpoint", ""), "checkpoint")
        inputs.append(ckpt)
        base = load_checkpoint(ckpt)
        space = hyperopt.finetune_space(base.n_layers)
        fc = replace(_pick(FinetuneConfig, cfg), rng_seed=seed)
        objective = hyperopt.finetune_objective(base, read_sparse_csv(data_path), fc)
    else:
        raise UsageError(f"unknown stage {stage!r}; choose pretrain or finetune")
    if args.space or cfg.get("space"):
        sp_path = _require(args.space or cfg["space"], "search space")
        space = hyperopt.SearchSpace.from_dict(_load_json(sp_path))
        inputs.append(sp_path)
    result = hyperopt.optimize(space, objective, cfg.get("n_initial", 36), cfg.get("n_trials", 100), seed=seed,
                               log_path=out / "trials.jsonl")
    _write_json(out / "best.json", {"point": result.best_point, "objective": result.best_objective
                                    if np.isfinite(result.best_objective) else None})
    _say(f"best objective {result.best_objective:.4e} at {result.best_point}")
    return cfg | {"space": space.to_dict()}, seed, inputs


def cmd_experiment(args, cfg: dict, out: Path):
    cfg = _merge(cfg, seed=args.seed, base_checkpoint=args.checkpoint)
    ec = experiment.ExperimentConfig.from_dict(cfg)
    report = experiment.run_experiment(ec, out_dir=out, log=_say)
    print(report.summary())
    inputs = [Path(ec.base_checkpoint)] if ec.base_checkpoint else []
    return ec.to_dict(), ec.seed, inputs


COMMANDS = {
    "gen-case": cmd_gen_case,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "gpod": cmd_gpod,
    "hyperopt": cmd_hyperopt,
    "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cpfusion", description="Fuse dense simulated and sparse measured surface pressure.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="JSON config; flags override its values")
        p.add_argument("--out", metavar="DIR", required=True, help="output directory")
        p.add_argument("--seed", type=int, metavar="U64", help=f"random seed (default {DEFAULT_SEED})")
        return p

    common(sub.add_parser("gen-case", help="generate the synthetic rigid/deformed case and sensors"))

    p = common(sub.add_parser("pretrain", help="train a network on a dense dataset"))
    p.add_argument("--data", metavar="PATH", help="dense CSV")
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--layers", type=int, help="number of hidden layers")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--batch-size", type=int)

    p = common(sub.add_parser("finetune", help="fine-tune a checkpoint on sensor data"))
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--data", metavar="PATH", help="sparse CSV")
    p.add_argument("--strategy", choices=[s.value for s in Strategy])
    p.add_argument("--condition", type=int, help="column index for single-point fine-tuning")
    p.add_argument("--sections", type=_int_list, metavar="LIST", help="section ids held out from fine-tuning")
    p.add_argument("--frozen-prefix", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = common(sub.add_parser("predict", help="evaluate a checkpoint on a grid"))
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--grid", metavar="PATH", help="dense CSV providing the grid (and default conditions)")
    p.add_argument("--mach", type=float)
    p.add_argument("--alpha", type=float)

    p = common(sub.add_parser("gpod", help="gappy POD reconstruction"))
    p.add_argument("--dense", metavar="PATH", help="dense snapshot CSV")
    p.add_argument("--sparse", metavar="PATH", help="sensor CSV")
    p.add_argument("--condition", type=int, help="sensor column to fuse (default: all)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--rank", type=int, metavar="R")
    g.add_argument("--energy", type=float, metavar="F")
    p.add_argument("--noise", type=float, metavar="VAR")

    p = common(sub.add_parser("hyperopt", help="Bayesian hyperparameter search"))
    p.add_argument("--stage", choices=["pretrain", "finetune"])
    p.add_argument("--space", metavar="PATH", help="search-space JSON")
    p.add_argument("--data", metavar="PATH")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--n-initial", type=int)
    p.add_argument("--n-trials", type=int)
    p.add_argument("--epochs", type=int, help="epoch budget per trial")

    p = common(sub.add_parser("experiment", help="run the full method comparison"))
    p.add_argument("--checkpoint", metavar="PATH", help="pre-trained base model (skips pre-training)")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        _say(str(exc))
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    try:
        cfg = _load_json(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        resolved, seed, inputs = COMMANDS[args.command](args, cfg, out)
        _provenance(out, args.command, argv, resolved, seed, inputs)
    except UsageError as exc:
        _say(f"usage error: {exc}")
        return 1
    except FileNotFoundError as exc:
        _say(f"error: {exc}")
        return 2
    except Exception as exc:  # noqa: BLE001
        _say(f"error: {type(exc).__name__}: {exc}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
