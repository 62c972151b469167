import numpy as np
import pytest

from cpfusion import synth
from cpfusion.data import FlowCondition, area_weighted_rmse, fit_scaler
from cpfusion.mlp import TrainConfig, init_model, train
from cpfusion.transfer import FinetuneConfig, Strategy, finetune, predict_field, run_strategy


@pytest.fixture(scope="module")
def case():
    g = synth.PlanformGrid(12, 6)
    conds = synth.generate_doe(8)
    rigid = synth.generate_dense(conds, g)
    truth = synth.generate_dense(conds, g, deformed=True)
    sensors = synth.extract_sensors(truth, 3, 5)
    x, y = rigid.features(), rigid.targets()
    base, _ = train(init_model(fit_scaler(x), 16, 3, seed=0), x, y,
                    TrainConfig(initial_lr=3e-3, batch_size=64, max_epochs=150, patience=150))
    return g, conds, rigid, truth, sensors, base


def test_config_defaults():
    c = FinetuneConfig()
    assert (c.frozen_prefix, c.initial_lr, c.decay_factor, c.patience) == (2, 3e-5, 0.998, 30)
    assert FinetuneConfig(strategy="sp").strategy is Strategy.SINGLE_POINT


def test_small_measurement_sets_skip_validation():
    c = FinetuneConfig(fixed_epochs=7)
    small = c.train_config(49)
    assert small.validation_fraction == 0.0 and small.max_epochs == 7
    big = c.train_config(50)
    assert big.validation_fraction == 0.2 and big.max_epochs == c.max_epochs


def test_finetune_freezes_prefix_and_keeps_scaler(case):
    _, _, _, _, sensors, base = case
    cfg = FinetuneConfig(initial_lr=1e-3, max_epochs=20)
    tuned, hist = finetune(base, sensors, cfg)
    assert tuned.scaler is base.scaler
    assert tuned.frozen_prefix == 2
    for i in range(2):
        assert np.array_equal(tuned.layers[i][0], base.layers[i][0])
    assert any(not np.array_equal(tuned.layers[i][0], base.layers[i][0]) for i in range(2, base.n_layers))
    assert hist.epochs_run >= 1


def test_multi_point_reduces_error_on_unseen_conditions(case):
    g, conds, _, truth, sensors, base = case
    w = g.surface.area_weights
    train_idx, test_idx = [0, 2, 4, 6], [1, 3, 5, 7]
    cfg = FinetuneConfig(initial_lr=1e-3, max_epochs=300, patience=40)
    fields = run_strategy(base, sensors.select_conditions(train_idx), [conds[j] for j in test_idx], g.surface, cfg)
    before = [area_weighted_rmse(predict_field(base, g.surface, conds[j]), truth.values[:, j], w) for j in test_idx]
    after = [area_weighted_rmse(f, truth.values[:, j], w) for f, j in zip(fields, test_idx)]
    assert np.mean(after) < np.mean(before)


def test_single_point_needs_matching_condition(case):
    g, conds, _, _, sensors, base = case
    cfg = FinetuneConfig(strategy="sp", max_epochs=5, fixed_epochs=5)
    with pytest.raises(ValueError, match="single-point"):
        finetune(base, sensors, cfg)
    with pytest.raises(ValueError, match="no measurements"):
        run_strategy(base, sensors, [FlowCondition(0.61, 1.23)], g.surface, cfg)
    out = run_strategy(base, sensors, [conds[2]], g.surface, cfg)
    assert out[0].shape == (len(g),)


def test_single_point_fits_its_condition(case):
    g, conds, _, truth, sensors, base = case
    w = g.surface.area_weights
    cfg = FinetuneConfig(strategy="sp", initial_lr=1e-3, max_epochs=300, patience=40)
    j = 5
    (field,) = run_strategy(base, sensors.select_conditions([j]), [conds[j]], g.surface, cfg)
    before = area_weighted_rmse(predict_field(base, g.surface, conds[j]), truth.values[:, j], w)
    assert area_weighted_rmse(field, truth.values[:, j], w) < before


def test_finetune_deterministic(case):
    _, _, _, _, sensors, base = case
    cfg = FinetuneConfig(initial_lr=1e-3, max_epochs=15)
    a, _ = finetune(base, sensors, cfg)
    b, _ = finetune(base, sensors, cfg)
    assert all(np.array_equal(p[0], q[0]) for p, q in zip(a.layers, b.layers))


def test_empty_measurements_rejected(case):
    _, _, _, _, sensors, base = case
    with pytest.raises(ValueError, match="empty measurements"):
        finetune(base, sensors.select_conditions([]))
