"""
How much does a glimpse cost?
=============================

Cost is counted as multiply-accumulates of weight matrices only. The
reference is a one-hidden-layer net reading the full image.
"""

from glimpse.evaluation import baseline_fc_flops, geometry_speedup
from glimpse.model import ModelConfig, glimpse_flops, loc_flops, n0_flops, run_flops
from glimpse.nn import mac_count

# %%
# The jittered setup: 48x48 canvas, 12x12 low-resolution view, 12x12 patches
# at two scales, 500 hidden units, 10 classes.
cfg = ModelConfig()
print("N0:", n0_flops(cfg))                    # 144*500 + 500*10
print("location predictor:", loc_flops(cfg))   # 2*(500 + 10)
print("glimpse net:", glimpse_flops(cfg))      # 288*500 + 500*10
base = baseline_fc_flops(48, 500, 10)
print("baseline on 48x48:", base)

for g in range(cfg.num_glimpses + 1):
    f = run_flops(cfg, g)
    print(f"{g} glimpses: {f:>7} MACs, speed-up {base / f:.2f}")

# %%
# A single-resolution glimpse drops the 24x24 context scale, halving the
# glimpse input.
print("single resolution, 1 glimpse:", round(geometry_speedup(48, 12, 12, 1, glimpses=1), 2))

# %%
# Plain MNIST: 28x28 images, 10x10 low-resolution view and 10x10 patches.
# 28 is not a multiple of 10, so this geometry only exists as arithmetic.
print("MNIST low-resolution only:", round(geometry_speedup(28, 10, 10, 1, glimpses=0), 2))
print("MNIST 1 glimpse:", round(geometry_speedup(28, 10, 10, 1, glimpses=1), 2))
print("a 100-500-10 net:", mac_count(100, 500, 10))
