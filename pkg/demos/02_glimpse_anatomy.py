"""
Anatomy of one forward pass
===========================

Place a digit on a larger canvas, look at it at low resolution, then take
two foveal glimpses and combine the evidence.
"""

import numpy as np

from glimpse.data import JitterSpec, LabeledSet, make_jittered
from glimpse.imaging import box_downsample, foveal_extract
from glimpse.model import GlimpseModel, ModelConfig, aggregate, run, run_cascaded
from glimpse.nn import softmax

# %%
# A synthetic "digit": a bright bar on a 28x28 patch, jittered onto 48x48.
digit = np.zeros((1, 28, 28), dtype=np.uint8)
digit[0, 6:22, 12:16] = 255
canvas = make_jittered(LabeledSet(digit, [1]), JitterSpec(canvas=48, copies_per_image=1, seed=3))
img = canvas.pixels(0)
rows, cols = np.nonzero(img)
print("bar lands at rows", rows.min(), "-", rows.max(), "cols", cols.min(), "-", cols.max())

# %%
# N0 sees a 4x box-averaged copy.
low = box_downsample(img, 4)
print("low-resolution view", low.shape, "mass preserved:", np.isclose(low.sum() * 16, img.sum()))

# %%
# A glimpse at the image centre: a sharp 12x12 patch plus a 24x24 context
# crop averaged down to 12x12.
fine, coarse = foveal_extract(img, np.array([0.5, 0.5]), 12, 2)
print("glimpse scales", fine.shape, coarse.shape)

# %%
# An untrained model still runs end to end; the trace keeps every
# intermediate result.
model = GlimpseModel.init(ModelConfig(), seed=0)
trace = run(model, img)
for n, (loc, agg) in enumerate(zip(trace.locations, trace.aggregates), 1):
    print(f"glimpse {n} at x={loc[0]:.3f} y={loc[1]:.3f}, max prob {agg.max():.3f}")
print("MACs:", trace.flops)

# %%
# The aggregate is a geometric mean of the class distributions.
oL, oH = trace.low_logits, trace.stage_logits
prod = softmax(oL) * np.sqrt(softmax(oH[0]) * softmax(oH[1]))
print("geometric-mean identity:", np.allclose(aggregate(oL, oH), prod / prod.sum(), atol=1e-12))

# %%
# With an early-exit threshold, confident inputs stop after N0.
label, t = run_cascaded(model, img, threshold=0.05)
print("threshold 0.05 decided at stage", t.decided_at, "with", t.flops, "MACs")
