"""
A small end-to-end run
======================

Train the two-glimpse model on a reduced jittered set, compare the stages
and try the early-exit cascade. Pass ``--full`` for the acceptance-sized run
(about four minutes per stage on one core).

Needs MNIST digits: set ``GLIMPSE_MNIST_DIR`` or install the ``desk`` extra.
"""

import sys
import tempfile
from pathlib import Path

from glimpse.desk import DeskSpec, desk_sets
from glimpse.evaluation import dump_filters, dump_traces, evaluate, evaluate_cascade
from glimpse.model import GlimpseModel, ModelConfig
from glimpse.training import TrainHyper, train_full

full = "--full" in sys.argv
spec = DeskSpec() if full else DeskSpec(n_train=1000, n_test=500, train_copies=4)
train, test, source = desk_sets(spec)
print(source)

# %%
hyper = TrainHyper(epochs=10 if full else 3)
model = GlimpseModel.init(ModelConfig(), seed=0)
train_full(model, train, hyper, log=print, fine_tune_last=False)

# %%
for g in range(3):
    rep = evaluate(model, test, g)
    print(f"{g} glimpses: error {100 * rep.error_rate:.2f}%, speed-up {rep.speedup:.1f}")

# %%
# Stop as soon as any stage is 95% sure.
print(evaluate_cascade(model, test, 0.95, force_final=True).table("cascaded"))

# %%
out = Path(tempfile.mkdtemp(prefix="glimpse-demo-"))
dump_filters(model.n0, 20, 25, out / "n0-filters.pgm")
img, sidecar, _ = dump_traces(model, test, 5, out / "traces.pgm")
print("pictures in", out)
print(sidecar.read_text())
