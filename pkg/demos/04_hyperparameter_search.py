"""Bayesian search over the pre-training hyperparameters (tiny budget)."""

# %%
from cpfusion import hyperopt, synth
from cpfusion.mlp import TrainConfig

grid = synth.PlanformGrid(12, 6)
rigid = synth.generate_dense(synth.generate_doe(20), grid)

space = hyperopt.pretrain_space()
print("searching", space.names)

objective = hyperopt.pretrain_objective(rigid.features(), rigid.targets(),
                                        TrainConfig(batch_size=256, max_epochs=20, patience=10))

# %% 6 Latin-hypercube points, then 6 expected-improvement proposals
result = hyperopt.optimize(space, objective, n_initial=6, n_trials=12, seed=0)
for t in result.trials:
    print(t.index, t.status, f"{t.objective:.3e}", t.point)
print("incumbent trace", [f"{v:.2e}" for v in result.incumbent_trace()])
print("best", result.best_point)
