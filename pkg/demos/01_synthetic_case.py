"""Walk through the synthetic wing: geometry, DoE, rigid vs deformed cp, sensors."""

# %%
import numpy as np

from cpfusion import synth
from cpfusion.data import area_weighted_rmse, section_cut

grid = synth.PlanformGrid()          # 40 chordwise x 20 spanwise nodes per side
print(len(grid), "surface nodes, planform area", grid.planform_area)

# %% Halton design over (Mach, alpha); the last 40 % is pushed into the transonic band
conds = synth.generate_doe(60)
machs = np.array([c.mach for c in conds])
print("conditions with M >= 0.8:", int((machs >= 0.8).sum()), "of", len(conds))

# %% rigid (simulation-like) and deformed (truth-like) fields
rigid = synth.generate_dense(conds, grid)
truth = synth.generate_dense(conds, grid, deformed=True)
w = grid.surface.area_weights
bias = [area_weighted_rmse(rigid.values[:, j], truth.values[:, j], w) for j in range(len(conds))]
j = int(np.argmax(bias))
print(f"largest rigid/deformed gap {bias[j]:.4f} at M={conds[j].mach:.3f}, alpha={conds[j].alpha:.2f}")

# %% the gap grows towards the tip: compare upper-surface cuts at two stations
for s in (0.35, 0.9):
    r = section_cut(grid.surface, rigid.values[:, j], s, 0.03, side="upper")
    t = section_cut(grid.surface, truth.values[:, j], s, 0.03, side="upper")
    print(f"s={s}: max |cp_rigid - cp_truth| = {np.abs(r[:, 1] - t[:, 1]).max():.4f}")

# %% 9 sections x 14 chord stations x 2 sides of pressure taps
sensors = synth.extract_sensors(truth)
print(len(sensors.grid), "sensors in sections", sorted(set(sensors.grid.section_ids.tolist())))
