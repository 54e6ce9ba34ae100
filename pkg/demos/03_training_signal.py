"""
Where to look, and how the gradients flow
=========================================

Training alternates a grid search for the best glimpse location with a
momentum step. Every gradient is checked against finite differences.
"""

import numpy as np

from glimpse.gradcheck import run_suite
from glimpse.imaging import to_pixel_center
from glimpse.model import GlimpseModel, ModelConfig
from glimpse.training import TrainHyper, candidate_grid, e_step

# %%
# Candidates form a 3x3 grid with a 2-pixel step around the predicted
# location; near the border they clamp and may repeat.
for loc in ([0.5, 0.5], [0.0, 1.0]):
    pix = [to_pixel_center(z, 48) for z in candidate_grid(np.array(loc), 48, 3, 2)]
    print(loc, "->", pix)

# %%
# The E-step picks z* (lowest loss plus location penalty) and z- (where a
# wrong class looks most convincing).
cfg = ModelConfig(full_side=16, low_side=4, patch_side=4, scales=2, classes=3, hidden=8,
                  num_glimpses=2)
model = GlimpseModel.init(cfg, seed=1)
img = np.random.default_rng(0).random((16, 16))
res = e_step(model, 1, img, label=2, hyper=TrainHyper(lam=1.0))
print("z* =", res.z_star, "z- =", res.z_minus, "offending class", res.offending_class)

# %%
# Hand-written backprop against central differences on toy sizes.
for name, err in run_suite().items():
    print(f"{name:32s} {err:.1e}")
