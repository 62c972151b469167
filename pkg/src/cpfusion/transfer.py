"""Fine-tuning a pre-trained model on sparse measurements.

The leading ``frozen_prefix`` layers keep their pre-trained weights; the
rest are re-trained on the sensor rows with the fine-tuning learning-rate
schedule. The input scaler always comes from the pre-trained model.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .data import FlowCondition, SparseDataset, SurfaceGrid, grid_features
from .mlp import MlpModel, TrainConfig, forward, train


class Strategy(str, enum.Enum):
    SINGLE_POINT = "sp"
    MULTI_POINT = "mp"


@dataclass(frozen=True)
class FinetuneConfig:
    frozen_prefix: int = 2
    initial_lr: float = 3e-5
    decay_factor: float = 0.998
    patience: int = 30
    strategy: Strategy = Strategy.MULTI_POINT
    batch_size: int = 4096
    max_epochs: int = 5000
    validation_fraction: float = 0.2
    # below this many rows there is no validation split and training runs
    # for exactly ``fixed_epochs``
    min_rows_for_validation: int = 50
    fixed_epochs: int = 2000
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))

    def train_config(self, n_rows: int) -> TrainConfig:
        small = n_rows < self.min_rows_for_validation
        return TrainConfig(
            initial_lr=self.initial_lr,
            decay_factor=self.decay_factor,
            batch_size=self.batch_size,
            max_epochs=min(self.fixed_epochs, self.max_epochs) if small else self.max_epochs,
            patience=self.patience,
            validation_fraction=0.0 if small else self.validation_fraction,
            rng_seed=self.rng_seed,
        )


def measurement_rows(measurements: SparseDataset):
    return measurements.features(), measurements.targets()


def finetune(base: MlpModel, measurements: SparseDataset, config: FinetuneConfig = FinetuneConfig()):
    """Re-train the non-frozen layers of ``base`` on measurement rows.

    Returns ``(model, history)``. Optimiser state starts fresh.
    """
    if measurements.n_conditions == 0 or len(measurements.grid) == 0:
        raise ValueError("empty measurements")
    if config.strategy is Strategy.SINGLE_POINT and measurements.n_conditions != 1:
        raise ValueError(
            f"single-point fine-tuning needs exactly one condition, got {measurements.n_conditions}"
        )
    x, y = measurement_rows(measurements)
    model = base.with_frozen_prefix(config.frozen_prefix)
    tuned, history = train(model, x, y, config.train_config(len(y)))
    return tuned, history


def predict_field(model: MlpModel, grid: SurfaceGrid, condition) -> np.ndarray:
    return forward(model, grid_features(grid, [condition]))


def run_strategy(
    base: MlpModel,
    measurements: SparseDataset,
    eval_conditions,
    grid: SurfaceGrid,
    config: FinetuneConfig = FinetuneConfig(),
) -> list[np.ndarray]:
    """Dense predictions on ``grid`` for each evaluation condition.

    Single-point: one independent fine-tune per evaluation condition, using
    only that condition's measurements. Multi-point: one fine-tune on every
    measured condition, then prediction anywhere.
    """
    conds = [c if isinstance(c, FlowCondition) else FlowCondition(*c) for c in eval_conditions]
    if config.strategy is Strategy.MULTI_POINT:
        tuned, _ = finetune(base, measurements, config)
        return [predict_field(tuned, grid, c) for c in conds]
    out = []
    for c in conds:
        try:
            col = measurements.index_of(c)
        except KeyError:
            raise ValueError(f"no measurements for single-point condition {c.as_tuple()}") from None
        tuned, _ = finetune(base, measurements.select_conditions([col]), config)
        out.append(predict_field(tuned, grid, c))
    return out
