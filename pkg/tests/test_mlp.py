import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpfusion import mlp
from cpfusion.data import MinMaxScaler, fit_scaler
from cpfusion.mlp import (
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    TrainConfig,
    TrainingDivergedError,
    init_model,
    loss_and_gradients,
    lr_at_epoch,
    train,
)


def _unit_scaler():
    return MinMaxScaler(np.zeros(8), np.ones(8))


def _data(n=64, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, 8))
    y = np.sin(3 * x[:, 0]) + 0.5 * x[:, 1] * x[:, 2]
    return x, y


def _naive_forward(model, x):
    # independent oracle: plain loops, scalar ELU
    h = model.scaler.transform(np.atleast_2d(x))
    for i, (w, b) in enumerate(model.layers):
        z = h @ w + b
        if i < len(model.layers) - 1:
            z = np.vectorize(lambda t: t if t > 0 else math.exp(t) - 1.0)(z)
        h = z
    return h[:, 0]


def test_elu_values():
    assert mlp.elu(np.array([2.0]))[0] == 2.0
    assert mlp.elu(np.array([0.0]))[0] == 0.0
    assert mlp.elu(np.array([-1.0]))[0] == pytest.approx(math.exp(-1) - 1, rel=1e-15)


def test_init_shapes_and_glorot_bounds():
    m = init_model(_unit_scaler(), hidden_dim=16, num_hidden_layers=3, seed=1)
    dims = [(8, 16), (16, 16), (16, 16), (16, 1)]
    assert [w.shape for w, _ in m.layers] == dims
    for (w, b), (fi, fo) in zip(m.layers, dims):
        assert np.all(np.abs(w) <= math.sqrt(6 / (fi + fo)))
        assert np.all(b == 0)
    assert m.n_parameters() == sum(fi * fo + fo for fi, fo in dims)
    assert m.hidden_dim == 16 and m.num_hidden_layers == 3


def test_default_architecture_parameter_count():
    m = init_model(_unit_scaler())
    assert m.n_layers == 10
    total = 8 * 64 + 64 + 8 * (64 * 64 + 64) + 65
    assert m.n_parameters() == total
    frozen = m.with_frozen_prefix(2)
    assert frozen.n_parameters(trainable_only=True) == total - (8 * 64 + 64) - (64 * 64 + 64)


def test_init_is_seeded():
    a = init_model(_unit_scaler(), 8, 2, seed=3)
    b = init_model(_unit_scaler(), 8, 2, seed=3)
    c = init_model(_unit_scaler(), 8, 2, seed=4)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a.layers, b.layers))
    assert not np.array_equal(a.layers[0][0], c.layers[0][0])


def test_forward_matches_naive_oracle():
    m = init_model(fit_scaler(_data()[0]), 12, 3, seed=2)
    x, _ = _data(20, seed=5)
    assert np.allclose(mlp.forward(m, x), _naive_forward(m, x), rtol=1e-13, atol=1e-14)
    single = mlp.forward(m, x[0])
    assert isinstance(single, float)
    assert single == pytest.approx(_naive_forward(m, x[:1])[0], rel=1e-13)


def test_forward_rejects_wrong_width():
    m = init_model(_unit_scaler(), 4, 1)
    with pytest.raises(ValueError):
        mlp.forward(m, np.zeros((3, 7)))


def test_model_arrays_are_read_only():
    m = init_model(_unit_scaler(), 4, 1)
    with pytest.raises(ValueError):
        m.layers[0][0][0, 0] = 1.0


def test_gradients_match_finite_differences():
    x, y = _data(16, seed=1)
    m = init_model(fit_scaler(x), 6, 2, seed=7).with_frozen_prefix(1)
    loss, grads = loss_and_gradients(m, x, y)
    assert set(grads) == {1, 2}
    assert loss == pytest.approx(mlp.mse(m, x, y), rel=1e-12)
    rng = np.random.default_rng(0)
    h = 1e-6
    for i in (1, 2):
        for k in (0, 1):
            arr = m.layers[i][k]
            for flat in rng.choice(arr.size, size=min(arr.size, 5), replace=False):
                layers = [(w.copy(), b.copy()) for w, b in m.layers]
                layers[i][k].flat[flat] += h
                up = mlp.mse(mlp.MlpModel(tuple(layers), m.scaler, 1), x, y)
                layers[i][k].flat[flat] -= 2 * h
                dn = mlp.mse(mlp.MlpModel(tuple(layers), m.scaler, 1), x, y)
                fd = (up - dn) / (2 * h)
                assert grads[i][k].flat[flat] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_lr_schedule():
    cfg = TrainConfig(initial_lr=1e-3, decay_factor=0.5)
    assert [lr_at_epoch(cfg, e) for e in range(1, 10)] == [1e-3] * 9
    assert lr_at_epoch(cfg, 10) == 5e-4
    assert lr_at_epoch(cfg, 12) == 1e-3 * 0.125
    with pytest.raises(ValueError):
        lr_at_epoch(cfg, 0)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-6, 1e-1), st.floats(0.5, 1.0), st.integers(10, 500))
def test_lr_schedule_monotone(l0, gamma, epoch):
    cfg = TrainConfig(initial_lr=l0, decay_factor=gamma)
    assert lr_at_epoch(cfg, epoch + 1) <= lr_at_epoch(cfg, epoch) <= l0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(initial_lr=0)
    with pytest.raises(ValueError):
        TrainConfig(decay_factor=1.5)
    with pytest.raises(ValueError):
        TrainConfig(validation_fraction=1.0)


def test_training_reduces_loss_and_is_deterministic():
    x, y = _data(200)
    m = init_model(fit_scaler(x), 16, 2, seed=0)
    cfg = TrainConfig(initial_lr=3e-3, max_epochs=60, batch_size=32, patience=60)
    a, ha = train(m, x, y, cfg)
    b, hb = train(m, x, y, cfg)
    assert ha.best_val_loss < ha.initial_val_loss / 5
    assert ha.train_loss == hb.train_loss
    assert all(np.array_equal(p[0], q[0]) for p, q in zip(a.layers, b.layers))


def test_fits_constant_target():
    x, _ = _data(128)
    m = init_model(fit_scaler(x), 8, 2, seed=1)
    out, hist = train(m, x, np.full(128, 0.7), TrainConfig(initial_lr=1e-2, max_epochs=300, batch_size=64))
    assert math.sqrt(np.mean((mlp.forward(out, x) - 0.7) ** 2)) < 1e-2


def test_returns_best_epoch_weights():
    x, y = _data(100)
    m = init_model(fit_scaler(x), 8, 2, seed=0)
    cfg = TrainConfig(initial_lr=3e-3, max_epochs=40, batch_size=16, patience=40)
    out, hist = train(m, x, y, cfg)
    tr, va = mlp.split_indices(100, 0.2, np.random.default_rng(0))
    assert mlp.mse(out, x[va], y[va]) == pytest.approx(hist.best_val_loss, rel=1e-12)
    assert hist.best_val_loss == min([hist.initial_val_loss] + hist.val_loss)


def test_early_stopping_patience():
    x, y = _data(60)
    m = init_model(fit_scaler(x), 8, 2, seed=0)
    # a huge learning rate makes validation loss stop improving quickly
    cfg = TrainConfig(initial_lr=0.5, max_epochs=500, batch_size=60, patience=3)
    try:
        _, hist = train(m, x, y, cfg)
    except TrainingDivergedError:
        return
    assert hist.epochs_run <= hist.best_epoch + 3
    assert hist.epochs_run < 500


def test_frozen_layers_unchanged():
    x, y = _data(80)
    m = init_model(fit_scaler(x), 8, 3, seed=0).with_frozen_prefix(2)
    out, _ = train(m, x, y, TrainConfig(initial_lr=1e-2, max_epochs=10, batch_size=16))
    for i in (0, 1):
        assert np.array_equal(out.layers[i][0], m.layers[i][0])
        assert np.array_equal(out.layers[i][1], m.layers[i][1])
    assert not np.array_equal(out.layers[2][0], m.layers[2][0])


def test_fully_frozen_is_noop():
    x, y = _data(20)
    m = init_model(fit_scaler(x), 4, 1).with_frozen_prefix(2)
    out, hist = train(m, x, y)
    assert out is m and hist.epochs_run == 0


def test_divergence_detected():
    x, y = _data(32)
    m = init_model(fit_scaler(x), 8, 2, seed=0)
    with pytest.raises(TrainingDivergedError, match="divergence"):
        train(m, x, y * 1e5, TrainConfig(max_epochs=5))


def test_final_fit_uses_all_rows():
    x, y = _data(100)
    m = init_model(fit_scaler(x), 8, 2, seed=0)
    cfg = TrainConfig(initial_lr=3e-3, max_epochs=15, batch_size=20, use_validation_in_final_fit=True)
    out, hist = train(m, x, y, cfg)
    plain, _ = train(m, x, y, TrainConfig(initial_lr=3e-3, max_epochs=15, batch_size=20))
    assert hist.best_epoch > 0
    assert not np.array_equal(out.layers[-1][0], plain.layers[-1][0])


# --------------------------------------------------------------------------


def test_checkpoint_round_trip_exact(tmp_path):
    x, y = _data(50)
    m, _ = train(init_model(fit_scaler(x), 8, 2, seed=0), x, y, TrainConfig(max_epochs=3, batch_size=10))
    m = m.with_frozen_prefix(1)
    p = tmp_path / "m.json"
    mlp.save_checkpoint(m, p)
    back = mlp.load_checkpoint(p)
    assert back.frozen_prefix == 1
    assert all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) for a, b in zip(m.layers, back.layers))
    assert np.array_equal(back.scaler.data_min, m.scaler.data_min)
    assert np.array_equal(mlp.forward(back, x), mlp.forward(m, x))
    d = json.loads(p.read_text())
    assert d["format_version"] == 1 and d["input_dim"] == 8 and d["num_hidden_layers"] == 2


def _saved(tmp_path):
    p = tmp_path / "m.json"
    mlp.save_checkpoint(init_model(_unit_scaler(), 4, 2), p)
    return p, json.loads(p.read_text())


def test_checkpoint_bad_version(tmp_path):
    p, d = _saved(tmp_path)
    d["format_version"] = 2
    p.write_text(json.dumps(d))
    with pytest.raises(CheckpointVersionError):
        mlp.load_checkpoint(p)


def test_checkpoint_truncated(tmp_path):
    p, _ = _saved(tmp_path)
    raw = p.read_text()
    p.write_text(raw[: len(raw) // 2])
    with pytest.raises(CheckpointTruncatedError):
        mlp.load_checkpoint(p)
    _, d = _saved(tmp_path)
    del d["layers"]
    p.write_text(json.dumps(d))
    with pytest.raises(CheckpointTruncatedError):
        mlp.load_checkpoint(p)


def test_checkpoint_shape_mismatch(tmp_path):
    p, d = _saved(tmp_path)
    d["layers"][1]["weights"] = d["layers"][1]["weights"][:-1]
    p.write_text(json.dumps(d))
    with pytest.raises(CheckpointShapeError, match="shape inconsistency"):
        mlp.load_checkpoint(p)
    _, d = _saved(tmp_path)
    d["num_hidden_layers"] = 5
    p.write_text(json.dumps(d))
    with pytest.raises(CheckpointShapeError):
        mlp.load_checkpoint(p)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        mlp.load_checkpoint(tmp_path / "nope.json")
