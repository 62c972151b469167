"""Multilayer perceptron regressor for surface cp.

Inputs are the eight raw features (mach, alpha, x, y, z, nx, ny, nz), mapped
through the model's :class:`~cpfusion.data.MinMaxScaler`; every hidden layer
is affine + ELU and the output layer is affine. Training is plain numpy:
mini-batch Adam with an exponential learning-rate schedule, early stopping
on a held-out split, and an optional frozen prefix of layers that never
receives updates.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import N_FEATURES, MinMaxScaler

FORMAT_VERSION = 1
DIVERGENCE_LIMIT = 1e6
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"divergence: loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class CheckpointError(ValueError):
    """Base class for unreadable checkpoint files."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Weights are stored as (fan_in, fan_out) matrices so that a layer is
    ``h @ W + b``. Arrays are read-only; training returns new models."""

    layers: tuple
    scaler: MinMaxScaler
    frozen_prefix: int = 0

    def __post_init__(self):
        layers = tuple((_readonly(w), _readonly(b)) for w, b in self.layers)
        if len(layers) < 2:
            raise ValueError("need at least one hidden layer and an output layer")
        prev = N_FEATURES
        width = layers[0][0].shape[1]
        for i, (w, b) in enumerate(layers):
            out = 1 if i == len(layers) - 1 else width
            if w.shape != (prev, out) or b.shape != (out,):
                raise ValueError(f"layer {i}: shapes {w.shape}/{b.shape} break the chain")
            prev = out
        if not 0 <= self.frozen_prefix <= len(layers):
            raise ValueError("frozen_prefix out of range")
        if self.scaler.n_features != N_FEATURES:
            raise ValueError("scaler must cover all 8 input features")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return N_FEATURES

    @property
    def hidden_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def num_hidden_layers(self) -> int:
        return len(self.layers) - 1

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def n_parameters(self, trainable_only: bool = False) -> int:
        start = self.frozen_prefix if trainable_only else 0
        return sum(w.size + b.size for w, b in self.layers[start:])

    def with_frozen_prefix(self, frozen_prefix: int) -> "MlpModel":
        return replace(self, frozen_prefix=frozen_prefix)

    def __call__(self, features) -> np.ndarray:
        return forward(self, features)


def init_model(
    scaler: MinMaxScaler,
    hidden_dim: int = 64,
    num_hidden_layers: int = 9,
    frozen_prefix: int = 0,
    seed: int = 0,
) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    if hidden_dim < 1 or num_hidden_layers < 1:
        raise ValueError("hidden_dim and num_hidden_layers must be positive")
    rng = np.random.default_rng(seed)
    dims = [N_FEATURES] + [hidden_dim] * num_hidden_layers + [1]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return MlpModel(tuple(layers), scaler, frozen_prefix)


def elu(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0, x, np.expm1(np.minimum(x, 0.0)))
    return out[()] if out.ndim == 0 else out


def _as_batch(model: MlpModel, features) -> tuple[np.ndarray, bool]:
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(1, -1) if single else x
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"expected features with {model.input_dim} columns, got shape {np.shape(features)}")
    return x, single


def _activations(layers, h):
    """Forward pass keeping the input and every hidden activation."""
    acts = [h]
    for w, b in layers[:-1]:
        h = h @ w
        h += b
        # elu(z) = max(z, 0) + expm1(min(z, 0)), in place
        neg = np.minimum(h, 0.0)
        np.expm1(neg, out=neg)
        np.maximum(h, 0.0, out=h)
        h += neg
        acts.append(h)
    w, b = layers[-1]
    return acts, (h @ w)[:, 0] + b[0]


def forward(model: MlpModel, features, chunk: int = 65536):
    """Predict cp for a single feature vector (returns a float) or a batch."""
    x, single = _as_batch(model, features)
    out = np.empty(len(x))
    for i in range(0, len(x), chunk):
        _, out[i : i + chunk] = _activations(model.layers, model.scaler.transform(x[i : i + chunk]))
    return float(out[0]) if single else out


def _loss_grads(layers, frozen_prefix: int, x_scaled, y):
    acts, pred = _activations(layers, x_scaled)
    resid = pred - y
    loss = math.fsum(resid * resid) / len(y)
    grads = {}
    d = (2.0 / len(y)) * resid[:, None]
    for i in range(len(layers) - 1, frozen_prefix - 1, -1):
        h = acts[i]
        grads[i] = (h.T @ d, d.sum(axis=0))
        if i > frozen_prefix:
            d = d @ layers[i][0].T
            # ELU'(z) = 1 for z >= 0, exp(z) = elu(z) + 1 otherwise
            d *= np.minimum(h, 0.0) + 1.0
    return loss, grads


def loss_and_gradients(model: MlpModel, features, targets):
    """Mean squared error and its gradients for all trainable layers.

    Returns ``(loss, grads)`` with ``grads`` mapping layer index to
    ``(dW, db)``; layers below ``model.frozen_prefix`` have no entry.
    """
    x, _ = _as_batch(model, features)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(y) == 0 or len(y) != len(x):
        raise ValueError("batch must be non-empty with one target per row")
    loss, grads = _loss_grads(model.layers, model.frozen_prefix, model.scaler.transform(x), y)
    if not math.isfinite(loss):
        raise TrainingDivergedError(0, loss)
    return loss, grads


def mse(model: MlpModel, features, targets) -> float:
    resid = forward(model, features) - np.asarray(targets, dtype=np.float64).reshape(-1)
    return math.fsum(resid * resid) / len(resid)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-3
    decay_factor: float = 0.995
    batch_size: int = 4096
    max_epochs: int = 1000
    patience: int = 100
    validation_fraction: float = 0.2
    rng_seed: int = 0
    use_validation_in_final_fit: bool = False

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 0:
            raise ValueError("batch_size and patience must be positive, max_epochs non-negative")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Constant for the first nine epochs, then exponential decay."""
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    if epoch >= 10:
        return config.initial_lr * config.decay_factor ** (epoch - 9)
    return config.initial_lr


@dataclass
class TrainingHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)
    initial_val_loss: float | None = None
    best_epoch: int = 0
    best_val_loss: float | None = None

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)


def split_indices(n: int, validation_fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_val = int(round(validation_fraction * n))
    if validation_fraction > 0 and n - n_val < 1:
        n_val = n - 1
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _check(loss: float, epoch: int) -> None:
    if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise TrainingDivergedError(epoch, loss)


def _run_epochs(model, x, y, x_val, y_val, config, rng, history, max_epochs):
    """Adam over ``max_epochs``; returns the layers of the best epoch."""
    p = model.frozen_prefix
    layers = [(w.copy(), b.copy()) for w, b in model.layers]
    m = {i: (np.zeros_like(w), np.zeros_like(b)) for i, (w, b) in enumerate(layers) if i >= p}
    v = {i: (np.zeros_like(w), np.zeros_like(b)) for i, (w, b) in enumerate(layers) if i >= p}
    has_val = len(y_val) > 0
    best_layers = [(w.copy(), b.copy()) for w, b in layers]
    best = _val_loss(layers, x_val, y_val) if has_val else math.inf
    history.initial_val_loss = best if has_val else None
    history.best_val_loss = best if has_val else None
    history.best_epoch = 0
    bs = min(config.batch_size, len(y))
    step = 0
    for epoch in range(1, max_epochs + 1):
        lr = lr_at_epoch(config, epoch)
        order = rng.permutation(len(y))
        batch_losses = []
        for start in range(0, len(y), bs):
            idx = order[start : start + bs]
            loss, grads = _loss_grads(layers, p, x[idx], y[idx])
            _check(loss, epoch)
            batch_losses.append(loss * len(idx))
            step += 1
            c1 = 1.0 - ADAM_BETA1**step
            c2 = 1.0 - ADAM_BETA2**step
            for i, gs in grads.items():
                for k in (0, 1):
                    g, mk, vk, par = gs[k], m[i][k], v[i][k], layers[i][k]
                    mk *= ADAM_BETA1
                    mk += (1.0 - ADAM_BETA1) * g
                    vk *= ADAM_BETA2
                    vk += (1.0 - ADAM_BETA2) * (g * g)
                    par -= lr * (mk / c1) / (np.sqrt(vk / c2) + ADAM_EPS)
        history.train_loss.append(math.fsum(batch_losses) / len(y))
        history.learning_rate.append(lr)
        if not has_val:
            history.best_epoch = epoch
            best_layers = layers
            continue
        val = _val_loss(layers, x_val, y_val)
        _check(val, epoch)
        history.val_loss.append(val)
        if val < best:
            best = val
            history.best_epoch = epoch
            history.best_val_loss = val
            best_layers = [(w.copy(), b.copy()) for w, b in layers]
        elif epoch - history.best_epoch >= config.patience:
            break
    # frozen layers keep the caller's (read-only) arrays
    return tuple(model.layers[i] if i < p else best_layers[i] for i in range(len(layers)))


def _val_loss(layers, x_val, y_val) -> float:
    _, pred = _activations(layers, x_val)
    r = pred - y_val
    return math.fsum(r * r) / len(r)


def train(model: MlpModel, features, targets, config: TrainConfig = TrainConfig()):
    """Fit the trainable layers of ``model``.

    Returns ``(trained_model, history)``. With a validation split the
    returned weights are those of the epoch with the lowest validation loss
    (the starting weights count as epoch 0); without one, the final weights.
    """
    x_raw, _ = _as_batch(model, features)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(y) == 0:
        raise ValueError("empty training data")
    if len(y) != len(x_raw):
        raise ValueError("features and targets differ in length")
    x = model.scaler.transform(x_raw)
    rng = np.random.default_rng(config.rng_seed)
    tr, va = split_indices(len(y), config.validation_fraction, rng)
    history = TrainingHistory()
    if model.frozen_prefix == model.n_layers or config.max_epochs == 0:
        return model, history
    layers = _run_epochs(model, x[tr], y[tr], x[va], y[va], config, rng, history, config.max_epochs)
    if config.use_validation_in_final_fit and len(va) and history.best_epoch > 0:
        refit = TrainingHistory()
        layers = _run_epochs(model, x, y, x[:0], y[:0], config, rng, refit, history.best_epoch)
    return replace(model, layers=layers), history


# --------------------------------------------------------------------------
# checkpoints


def model_to_dict(model: MlpModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "num_hidden_layers": model.num_hidden_layers,
        "frozen_prefix": model.frozen_prefix,
        "scaler": model.scaler.to_dict(),
        "layers": [{"weights": w.tolist(), "bias": b.tolist()} for w, b in model.layers],
    }


def model_from_dict(d: dict) -> MlpModel:
    if d.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint format_version {d.get('format_version')!r} (expected {FORMAT_VERSION})"
        )
    try:
        n_hidden, width, in_dim = d["num_hidden_layers"], d["hidden_dim"], d["input_dim"]
        raw = d["layers"]
        scaler = MinMaxScaler.from_dict(d["scaler"])
        frozen = d["frozen_prefix"]
    except (KeyError, TypeError) as exc:
        raise CheckpointTruncatedError(f"checkpoint missing field {exc}") from None
    if in_dim != N_FEATURES or len(raw) != n_hidden + 1:
        raise CheckpointShapeError("shape inconsistency: layer count or input_dim does not match metadata")
    dims = [in_dim] + [width] * n_hidden + [1]
    layers = []
    for i, entry in enumerate(raw):
        try:
            w = np.array(entry["weights"], dtype=np.float64)
            b = np.array(entry["bias"], dtype=np.float64)
        except (KeyError, ValueError, TypeError):
            raise CheckpointShapeError(f"shape inconsistency: layer {i} is not a rectangular array") from None
        if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
            raise CheckpointShapeError(
                f"shape inconsistency: layer {i} has {w.shape}/{b.shape}, "
                f"metadata implies {(dims[i], dims[i + 1])}/{(dims[i + 1],)}"
            )
        layers.append((w, b))
    try:
        return MlpModel(tuple(layers), scaler, frozen)
    except ValueError as exc:
        raise CheckpointShapeError(f"shape inconsistency: {exc}") from None


def save_checkpoint(model: MlpModel, path) -> None:
    # float repr is the shortest string that round-trips to the same double
    text = json.dumps(model_to_dict(model), separators=(",", ":"))
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    os.replace(tmp, path)


def load_checkpoint(path) -> MlpModel:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointTruncatedError(f"{path}: truncated or malformed checkpoint ({exc.msg})") from None
    if not isinstance(d, dict):
        raise CheckpointTruncatedError(f"{path}: checkpoint is not a JSON object")
    return model_from_dict(d)
