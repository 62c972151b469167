import json

import numpy as np
import pytest

from cpfusion import synth
from cpfusion.data import area_weighted_rmse, fit_scaler, read_dense_csv, read_prediction_csv
from cpfusion.experiment import ConfigError, ExperimentConfig, holdout_sections, pooled_rmse, run_experiment
from cpfusion.mlp import init_model
from cpfusion.transfer import finetune


def tiny(**kw):
    base = dict(
        n_chord=10, n_span=6, n_sections=3, n_chord_per_section=4, n_conditions=10,
        hidden_dim=8, num_hidden_layers=2, pretrain_lr=5e-3, pretrain_batch_size=64, pretrain_epochs=15,
        finetune_lr=1e-3, finetune_max_epochs=10, finetune_batch_size=64,
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    return out, run_experiment(tiny(), out_dir=out)


def test_report_structure(run):
    out, rep = run
    assert rep.methods == ["base", "sp", "mp", "gappy"]
    ft, te = rep.data["finetune_indices"], rep.data["test_indices"]
    assert ft == [0, 3, 5, 8] and not set(ft) & set(te)
    for m in rep.methods:
        assert len(rep.per_condition(m)) == len(te)
    assert set(rep.timings) >= {"pretrain", "sp", "mp", "gappy"}
    assert "timings" not in rep.data
    cut = rep.data["cuts"][0]["gappy"]["0.35"]["upper"]
    assert len(cut) > 0 and all(len(row) == 2 for row in cut)
    assert (out / "report.json").read_text() == rep.to_json()
    assert "pooled all" in rep.summary()


def test_rmse_recomputable_from_csvs(run):
    out, rep = run
    truth = read_dense_csv(out / "truth_test.csv")
    w = truth.grid.area_weights
    for m in rep.methods:
        fields = []
        for k, i in enumerate(rep.data["test_indices"]):
            arr = read_prediction_csv(out / "predictions" / m / f"cond_{i:03d}.csv")
            fields.append(arr[:, 5])
            assert abs(area_weighted_rmse(arr[:, 5], truth.values[:, k], w) - rep.per_condition(m)[k]) <= 1e-12
        pooled = pooled_rmse(fields, [truth.values[:, k] for k in range(truth.n_conditions)], w)
        assert abs(pooled - rep.rmse(m)) <= 1e-12


def test_aggregate_is_pooled_not_mean():
    w = np.ones(2)
    a, b = np.array([1.0, 1.0]), np.array([3.0, 3.0])
    z = np.zeros(2)
    # per-condition RMSEs 1 and 3: mean 2, pooled sqrt(5)
    assert pooled_rmse([a, b], [z, z], w) == pytest.approx(np.sqrt(5.0))


def test_reports_byte_identical(run, tmp_path):
    out, _ = run
    run_experiment(tiny(), out_dir=tmp_path)
    assert (tmp_path / "report.json").read_bytes() == (out / "report.json").read_bytes()
    assert (tmp_path / "base_model.json").read_bytes() == (out / "base_model.json").read_bytes()


def test_base_only_has_no_finetuned_columns(run, tmp_path):
    out, _ = run
    rep = run_experiment(tiny(methods=["base"], base_checkpoint=str(out / "base_model.json")), out_dir=tmp_path)
    assert rep.methods == ["base"]
    assert "mp" not in rep.data["runs"] and "sp" not in rep.data["runs"]
    assert rep.per_condition("base") == run[1].per_condition("base")


def test_fail_fast_validation(tmp_path):
    with pytest.raises(ConfigError, match="overlap"):
        tiny(finetune_indices=[0, 1], test_indices=[1, 2]).validate()
    with pytest.raises(FileNotFoundError, match="nope.json"):
        run_experiment(tiny(base_checkpoint=str(tmp_path / "nope.json")), out_dir=tmp_path / "o")
    assert not (tmp_path / "o").exists()
    with pytest.raises(ConfigError):
        tiny(methods=["base", "magic"]).validate()
    with pytest.raises(ConfigError):
        tiny(test_indices=[99]).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"n_conditons": 3})


def test_config_dict_round_trip():
    cfg = tiny(cut_spans=[0.2, 0.5])
    d = json.loads(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.from_dict(d) == cfg


# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sensors():
    g = synth.PlanformGrid()
    dense = synth.generate_dense(synth.generate_doe(2), g, deformed=True)
    return synth.extract_sensors(dense)


def test_holdout_three_and_nine(sensors):
    train, val = holdout_sections(sensors, [3, 9])
    assert len(val.grid) == 2 * 2 * 14
    assert set(val.grid.section_ids.tolist()) == {3, 9}
    assert len(train.grid) + len(val.grid) == 252
    assert not {3, 9} & set(train.grid.section_ids.tolist())


def test_holdout_empty_and_all(sensors):
    train, val = holdout_sections(sensors, [])
    assert len(train.grid) == 252 and len(val.grid) == 0
    train, val = holdout_sections(sensors, range(1, 10))
    assert len(train.grid) == 0
    base = init_model(fit_scaler(sensors.features()), 4, 2)
    with pytest.raises(ValueError, match="empty measurements"):
        finetune(base, train)


def test_holdout_unknown_id(sensors):
    with pytest.raises(ValueError, match="unknown section"):
        holdout_sections(sensors, [10])
