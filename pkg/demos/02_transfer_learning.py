"""Pre-train on rigid data, then fine-tune on deformed sensor data (reduced sizes)."""

# %%
import numpy as np

from cpfusion import synth
from cpfusion.data import area_weighted_rmse, fit_scaler
from cpfusion.mlp import TrainConfig, init_model, train
from cpfusion.transfer import FinetuneConfig, Strategy, finetune, predict_field

grid = synth.PlanformGrid(20, 10)
conds = synth.generate_doe(30)
rigid = synth.generate_dense(conds, grid)
truth = synth.generate_dense(conds, grid, deformed=True)
sensors = synth.extract_sensors(truth, 5, 8)
w = grid.surface.area_weights

# %% pre-training on every rigid condition
x, y = rigid.features(), rigid.targets()
base = init_model(fit_scaler(x), hidden_dim=32, num_hidden_layers=4, seed=0)
base, hist = train(base, x, y, TrainConfig(initial_lr=3e-3, batch_size=256, max_epochs=150))
print(f"pre-training: best epoch {hist.best_epoch}, validation MSE {hist.best_val_loss:.2e}")

# %% multi-point fine-tuning on a third of the conditions, evaluated on the rest
tune = list(range(0, 30, 3))
test = [j for j in range(30) if j not in tune]
mp, mp_hist = finetune(base, sensors.select_conditions(tune), FinetuneConfig(initial_lr=1e-3, max_epochs=500))
print(f"multi-point: {mp_hist.epochs_run} epochs, first two layers frozen")


def score(model, js):
    return np.mean([area_weighted_rmse(predict_field(model, grid.surface, conds[j]), truth.values[:, j], w) for j in js])


print(f"mean RMSE on unseen conditions: base {score(base, test):.4f} -> MP {score(mp, test):.4f}")

# %% single-point fine-tuning at one condition
j = test[-1]
sp, _ = finetune(base, sensors.select_conditions([j]),
                 FinetuneConfig(strategy=Strategy.SINGLE_POINT, initial_lr=1e-3, max_epochs=500))
print(f"condition {j}: base {score(base, [j]):.4f}, SP {score(sp, [j]):.4f}, MP {score(mp, [j]):.4f}")
