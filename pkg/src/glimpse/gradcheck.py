"""Finite-difference verification of every training loss on toy dimensions."""

from __future__ import annotations

from typing import Dict

import numpy as np

from .imaging import box_downsample
from .model import GlimpseModel, ModelConfig, predict_location, run_batch
from .nn import cross_entropy_grad, grad_check, log_softmax, mlp_backward, mlp_forward
from .training import (TrainHyper, candidate_grid, stage_loss_and_grads, stage_parameters)

TOLERANCE = 1e-4
TOY = ModelConfig(full_side=6, low_side=3, patch_side=2, scales=2, classes=2, hidden=5,
                  num_glimpses=2)
TOY10 = ModelConfig(full_side=8, low_side=4, patch_side=2, scales=2, classes=10, hidden=7,
                    num_glimpses=3)


def _toy_model(cfg: ModelConfig, seed: int) -> GlimpseModel:
    m = GlimpseModel.init(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for _, t in m.tensors():
        t[...] = rng.normal(scale=0.5, size=t.shape)
    return m


def _toy_batch(cfg: ModelConfig, n: int, seed: int):
    rng = np.random.default_rng(seed + 2)
    images = rng.random((n, cfg.full_side, cfg.full_side))
    labels = rng.integers(0, cfg.classes, n)
    return images, labels


def _grid_points(model, k, images, hyper, seed):
    """Arbitrary fixed z*, z- taken from each sample's candidate grid."""
    r = run_batch(model, images, k - 1)
    loc = predict_location(model, k, r.h_L, r.low_logits, list(r.stage_logits))
    grid = candidate_grid(loc, model.config.full_side, hyper.grid_side, hyper.grid_step)
    rng = np.random.default_rng(seed + 3)
    n, G, _ = grid.shape
    pick = lambda: grid[np.arange(n), rng.integers(0, G, n)]
    return pick(), pick()


def check_stage(cfg, k, hyper, seed=0, epsilon=1e-5, contrastive=True, fault=1.0, n=3):
    model = _toy_model(cfg, seed)
    images, labels = _toy_batch(cfg, n, seed)
    z_star, z_minus = _grid_points(model, k, images, hyper, seed)
    if not contrastive:
        z_minus = None
    _, grads = stage_loss_and_grads(model, k, images, labels, z_star, z_minus, hyper)
    grads = {key: g * fault for key, g in grads.items()}
    loss = lambda: stage_loss_and_grads(model, k, images, labels, z_star, z_minus, hyper,
                                        need_grads=False)[0]
    return grad_check(loss, stage_parameters(model, k), grads, epsilon)


def check_low_res(cfg, seed=0, epsilon=1e-5, fault=1.0, n=3):
    model = _toy_model(cfg, seed)
    images, labels = _toy_batch(cfg, n, seed)
    x = box_downsample(images, cfg.full_side // cfg.low_side).reshape(n, -1)

    def loss():
        _, o = mlp_forward(model.n0, x)
        return float(-log_softmax(o)[np.arange(n), labels].mean())

    h, o = mlp_forward(model.n0, x)
    grads, gx = mlp_backward(model.n0, x, h, cross_entropy_grad(o, labels) / n)
    grads = {key: g * fault for key, g in grads.items()}
    worst = grad_check(loss, model.n0.params(), grads, epsilon)
    return max(worst, grad_check(loss, {"x": x}, {"x": gx * fault}, epsilon))


def run_suite(epsilon: float = 1e-5, fault: float = 1.0) -> Dict[str, float]:
    """Worst relative error per loss component.

    ``fault`` scales every analytic gradient; anything other than 1 should
    make the suite fail.
    """
    h = TrainHyper()
    out = {
        "low_res_cross_entropy": check_low_res(TOY, 0, epsilon, fault),
        "stage1_full": check_stage(TOY, 1, h, 0, epsilon, fault=fault),
        "stage1_lambda0_no_contrastive": check_stage(TOY, 1, h.replace(lam=0.0), 1, epsilon,
                                                     contrastive=False, fault=fault),
        "stage2_full": check_stage(TOY, 2, h, 2, epsilon, fault=fault),
        "stage1_10class": check_stage(TOY10, 1, h, 3, epsilon, fault=fault),
        "stage3_10class": check_stage(TOY10, 3, h, 4, epsilon, fault=fault),
    }
    return out
