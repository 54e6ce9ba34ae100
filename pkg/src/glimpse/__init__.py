"""Sequential glimpse classification with a low-resolution first pass."""

from .data import JitterSpec, LabeledSet, batches, make_jittered, read_idx, write_idx
from .evaluation import EvalReport, baseline_fc_flops, evaluate, evaluate_cascade
from .model import (GlimpseModel, ModelConfig, aggregate, glimpse_forward, load, n0_forward,
                    predict_location, run, run_batch, run_cascaded, save)
from .nn import ContractError, Mlp, mac_count
from .training import TrainHyper, e_step, fine_tune, train_full, train_stage

__version__ = "0.1.0"
