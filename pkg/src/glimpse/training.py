"""Alternating latent-location training.

For every minibatch: run the frozen part of the pipeline, search a small grid
around the predicted location for the best location ``z*`` and the most
offending location ``z-`` (forward passes only), then take one momentum step
on the stage loss with those locations held fixed. Stages are trained
greedily; the last one is fine-tuned at its own predicted locations.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Dict, Optional

import numpy as np

from .data import LabeledSet, batches
from .imaging import box_downsample, foveal_batch, to_pixel_center
from .model import GlimpseModel, loc_input, n0_forward, predict_location, run_batch
from .nn import (ContractError, OptimizerState, cross_entropy_grad, log_softmax, mlp_backward,
                 mlp_forward, sgd_momentum_step)

Log = Optional[Callable[[str], None]]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainHyper:
    lam: float = 100.0
    gamma: float = 0.01
    sigma_sq: float = 0.002
    lr: float = 0.05
    momentum: float = 0.9
    batch: int = 50
    epochs: int = 50
    grid_side: int = 3
    grid_step: int = 2
    fine_tune_epochs: int = 10
    diversity_enabled: bool = True
    contrastive: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0 or self.sigma_sq <= 0 or self.lr < 0:
            raise ContractError("lam, gamma, lr must be >= 0 and sigma_sq > 0")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must be in [0, 1)")
        if self.grid_side < 1 or self.grid_side % 2 == 0:
            raise ContractError("grid_side must be a positive odd integer")
        if self.batch < 1 or self.epochs < 0 or self.fine_tune_epochs < 0 or self.grid_step < 0:
            raise ContractError("batch must be >= 1; epoch counts and grid_step >= 0")

    def replace(self, **kw) -> "TrainHyper":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return TrainHyper(**vals)


@dataclass
class EStepResult:
    z_star: np.ndarray
    z_minus: np.ndarray
    best_loss: float
    offending_class: int
    z_star_index: int = 0
    z_minus_index: int = 0


# ------------------------------------------------------------- E-step

def candidate_grid(loc, D: int, grid_side: int = 3, grid_step: int = 2) -> np.ndarray:
    """Normalized grid points around ``loc``; ``(G, 2)`` or ``(n, G, 2)`` for batched locs.

    Row-major over (row offset, column offset); points are clamped to the
    image, and duplicates produced by clamping are kept.
    """
    if grid_side % 2 == 0:
        raise ContractError("grid_side must be odd")
    loc = np.asarray(loc, dtype=np.float64)
    single = loc.ndim == 1
    loc = loc.reshape(-1, 2)
    rows, cols = to_pixel_center(loc, D)
    half = grid_side // 2
    off = (np.arange(grid_side) - half) * grid_step
    gr = np.clip(rows[:, None, None] + off[None, :, None], 0, D - 1)
    gc = np.clip(cols[:, None, None] + off[None, None, :], 0, D - 1)
    gr, gc = np.broadcast_arrays(gr, gc)
    scale = float(D - 1) if D > 1 else 1.0
    grid = np.stack([gc / scale, gr / scale], axis=-1).reshape(len(loc), grid_side ** 2, 2)
    return grid[0] if single else grid


def diversity_penalty(z, previous, gamma: float, sigma_sq: float, enabled: bool = True):
    """Sum of Gaussian bumps ``gamma * exp(-|z - l_j|^2 / (2 sigma_sq))``.

    ``z`` has shape ``(..., 2)``; ``previous`` is a sequence of locations that
    broadcast against ``z``.
    """
    z = np.asarray(z, dtype=np.float64)
    total = np.zeros(z.shape[:-1])
    if not enabled:
        return total if total.ndim else 0.0
    for p in previous:
        d2 = ((z - np.asarray(p)) ** 2).sum(axis=-1)
        total = total + gamma * np.exp(-d2 / (2.0 * sigma_sq))
    return total if total.ndim else float(total)


@dataclass
class _Context:
    """Frozen-pipeline quantities for a minibatch at stage k."""

    images: np.ndarray
    labels: np.ndarray
    x_low: np.ndarray
    h_L: np.ndarray
    o_L: np.ndarray
    prior_sum: np.ndarray     # sum of earlier stages' logits
    prior_locs: np.ndarray    # (k-1, n, 2)
    s: np.ndarray             # o_L + prior_sum, location-predictor input
    loc: np.ndarray           # predicted l^{p_k}


def _context(model: GlimpseModel, k: int, images, labels) -> _Context:
    cfg = model.config
    images = np.asarray(images, dtype=np.float64)
    r = run_batch(model, images, k - 1)
    prior_sum = r.stage_logits.sum(axis=0) if k > 1 else np.zeros_like(r.low_logits)
    loc = predict_location(model, k, r.h_L, r.low_logits, list(r.stage_logits))
    low = box_downsample(images, cfg.full_side // cfg.low_side).reshape(len(images), cfg.low_in)
    return _Context(images, np.asarray(labels, dtype=np.int64), low, r.h_L, r.low_logits,
                    prior_sum, r.locations, loc_input(r.low_logits, list(r.stage_logits)), loc)


def _grid_eval(model, k, ctx: _Context, hyper: TrainHyper):
    cfg = model.config
    n = len(ctx.labels)
    grid = candidate_grid(ctx.loc, cfg.full_side, hyper.grid_side, hyper.grid_step)
    G = grid.shape[1]
    x = foveal_batch(np.repeat(ctx.images, G, axis=0), grid.reshape(n * G, 2),
                     cfg.patch_side, cfg.scales)
    # clamped candidates often share a window; evaluate each distinct patch once so
    # exact ties stay exact and resolve to the lowest index
    rows = np.ascontiguousarray(x).view(np.dtype((np.void, x.shape[1] * x.itemsize))).ravel()
    _, first, inv = np.unique(rows, return_index=True, return_inverse=True)
    hu, ou = mlp_forward(model.stage(k).net, x[first])
    inv = inv.reshape(-1)
    h, o = hu[inv], ou[inv].reshape(n, G, -1)
    agg = ctx.o_L[:, None, :] + (ctx.prior_sum[:, None, :] + o) / k
    ce = -log_softmax(agg)                                     # (n, G, C)
    data = ce[np.arange(n), :, ctx.labels]                     # (n, G)
    obj = data + 0.5 * hyper.lam * ((ctx.loc[:, None, :] - grid) ** 2).sum(axis=-1)
    if k > 1:
        obj = obj + diversity_penalty(grid, ctx.prior_locs[:, :, None, :], hyper.gamma,
                                      hyper.sigma_sq, hyper.diversity_enabled)
    star = np.argmin(obj, axis=1)
    wrong = ce.copy()
    wrong[np.arange(n), :, ctx.labels] = np.inf
    flat = np.argmin(wrong.reshape(n, -1), axis=1)
    minus, cls = np.divmod(flat, ce.shape[2])
    return dict(grid=grid, x=x.reshape(n, G, -1), h=h.reshape(n, G, -1), o=o, obj=obj,
                star=star, minus=minus, offending=cls)


def e_step(model: GlimpseModel, k: int, img, label: int, hyper: TrainHyper) -> EStepResult:
    ctx = _context(model, k, np.asarray(img)[None], [label])
    ev = _grid_eval(model, k, ctx, hyper)
    s, m = int(ev["star"][0]), int(ev["minus"][0])
    return EStepResult(ev["grid"][0, s].copy(), ev["grid"][0, m].copy(),
                       float(ev["obj"][0, s]), int(ev["offending"][0]), s, m)


# ------------------------------------------------------ loss & gradients

def _param_groups(model: GlimpseModel, k: int, include_n0: bool) -> Dict[str, np.ndarray]:
    st = model.stage(k)
    params = {f"net.{n}": v for n, v in st.net.params().items()}
    params.update({f"loc.{n}": v for n, v in st.loc.params().items()})
    if include_n0:
        params.update({f"n0.{n}": v for n, v in model.n0.params().items()})
    return params


def stage_parameters(model: GlimpseModel, k: int) -> Dict[str, np.ndarray]:
    """Trainable tensors of stage ``k`` (N0 included for k = 1), by reference."""
    return _param_groups(model, k, include_n0=(k == 1))


def _batch_loss_grads(model, k, ctx: _Context, hyper: TrainHyper, z_star, z_minus,
                      cached=None, need_grads=True):
    cfg = model.config
    n = len(ctx.labels)
    y = ctx.labels
    net = model.stage(k).net
    lp = model.stage(k).loc
    contrastive = z_minus is not None

    if cached is not None:
        x_g, h_g, o_g = cached
    else:
        zs = [z_star] + ([z_minus] if contrastive else [])
        x_g = foveal_batch(np.concatenate([ctx.images] * len(zs)), np.concatenate(zs),
                           cfg.patch_side, cfg.scales)
        h_g, o_g = mlp_forward(net, x_g)

    parts = len(x_g) // n
    agg = np.tile(ctx.o_L + ctx.prior_sum / k, (parts, 1)) + o_g / k
    yy = np.tile(y, parts)
    lsm = log_softmax(agg)
    ce = -lsm[np.arange(len(yy)), yy]
    diff = ctx.loc - z_star
    loss_vec = ce.reshape(parts, n).sum(axis=0) + 0.5 * hyper.lam * (diff ** 2).sum(axis=1)
    if k == 1:
        lsm0 = log_softmax(ctx.o_L)
        loss_vec = loss_vec - lsm0[np.arange(n), y]
    loss = float(loss_vec.mean())
    if not need_grads:
        return loss, None

    grads = {}
    g_agg = cross_entropy_grad(agg, yy) / n
    g_net, _ = mlp_backward(net, x_g, h_g, g_agg / k)
    grads.update({f"net.{p}": g for p, g in g_net.items()})

    l = ctx.loc
    d_a = hyper.lam * diff * l * (1.0 - l) / n                # (n, 2)
    grads["loc.w_h"] = d_a.T @ ctx.h_L
    grads["loc.w_o"] = d_a.T @ ctx.s
    grads["loc.b"] = d_a.sum(axis=0)

    if k == 1:
        g_oL = cross_entropy_grad(ctx.o_L, y) / n + g_agg.reshape(parts, n, -1).sum(axis=0)
        g_oL = g_oL + d_a @ lp.w_o
        g_hL = d_a @ lp.w_h
        g_n0, _ = mlp_backward(model.n0, ctx.x_low, ctx.h_L, g_oL, grad_h=g_hL)
        grads.update({f"n0.{p}": g for p, g in g_n0.items()})
    return loss, grads


def stage_loss_and_grads(model: GlimpseModel, k: int, images, labels, z_star, z_minus,
                         hyper: TrainHyper, need_grads=True):
    """Mean stage-``k`` loss over a batch with locations held fixed.

    ``z_minus=None`` drops the contrastive term. Gradient keys follow
    :func:`stage_parameters`. Single images are accepted too.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images, labels = images[None], np.atleast_1d(labels)
        z_star = np.asarray(z_star, dtype=np.float64)[None]
        z_minus = None if z_minus is None else np.asarray(z_minus, dtype=np.float64)[None]
    ctx = _context(model, k, images, labels)
    return _batch_loss_grads(model, k, ctx, hyper, np.asarray(z_star, dtype=np.float64),
                             None if z_minus is None else np.asarray(z_minus, dtype=np.float64),
                             need_grads=need_grads)


def minibatch_step(model, k, images, labels, hyper: TrainHyper, state: OptimizerState):
    """E-step on the batch, then one momentum step. Returns the batch loss."""
    ctx = _context(model, k, images, labels)
    ev = _grid_eval(model, k, ctx, hyper)
    n = len(ctx.labels)
    idx = np.arange(n)
    z_star = ev["grid"][idx, ev["star"]]
    sel = [ev["star"]]
    z_minus = None
    if hyper.contrastive:
        z_minus = ev["grid"][idx, ev["minus"]]
        sel.append(ev["minus"])
    cached = tuple(np.concatenate([ev[key][idx, s] for s in sel]) for key in ("x", "h", "o"))
    loss, grads = _batch_loss_grads(model, k, ctx, hyper, z_star, z_minus, cached)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss at stage {k}")
    sgd_momentum_step(stage_parameters(model, k), grads, state)
    return loss


# ---------------------------------------------------------- training

def _iterate(data: LabeledSet, hyper: TrainHyper, stage: int, epoch: int):
    for idx in batches(len(data), hyper.batch, hyper.seed + 1000 * stage, epoch):
        yield data.pixels(idx), data.labels[idx]


def _epoch_line(stage, epoch, loss, model, glimpses, heldout):
    line = f"stage={stage} epoch={epoch} loss={loss:.6f}"
    if heldout is not None:
        from .evaluation import evaluate
        line += f" heldout_error={evaluate(model, heldout, glimpses).error_rate:.6f}"
    return line


def train_stage(model: GlimpseModel, k: int, train_set: LabeledSet, hyper: TrainHyper,
                log: Log = None, heldout: Optional[LabeledSet] = None) -> GlimpseModel:
    """Train stage ``k`` in place (N0 jointly when ``k == 1``)."""
    state = OptimizerState.for_params(stage_parameters(model, k), hyper.lr, hyper.momentum)
    for epoch in range(hyper.epochs):
        total, count = 0.0, 0
        for images, labels in _iterate(train_set, hyper, k, epoch):
            total += minibatch_step(model, k, images, labels, hyper, state) * len(labels)
            count += len(labels)
        if log:
            log(_epoch_line(k, epoch + 1, total / max(count, 1), model, k, heldout))
    return model


def train_low_res(model: GlimpseModel, train_set: LabeledSet, hyper: TrainHyper,
                  log: Log = None, heldout: Optional[LabeledSet] = None) -> GlimpseModel:
    """N0 alone on its cross-entropy (the zero-glimpse schedule)."""
    params = model.n0.params()
    state = OptimizerState.for_params(params, hyper.lr, hyper.momentum)
    for epoch in range(hyper.epochs):
        total, count = 0.0, 0
        for images, labels in _iterate(train_set, hyper, 0, epoch):
            h, o, _ = n0_forward(model, images)
            n = len(labels)
            loss = float(-log_softmax(o)[np.arange(n), labels].mean())
            if not np.isfinite(loss):
                raise TrainingDiverged("non-finite loss while training N0")
            f = model.config.full_side // model.config.low_side
            x = box_downsample(images, f).reshape(n, -1)
            grads, _ = mlp_backward(model.n0, x, h, cross_entropy_grad(o, labels) / n)
            sgd_momentum_step(params, grads, state)
            total += loss * n
            count += n
        if log:
            log(_epoch_line(0, epoch + 1, total / max(count, 1), model, 0, heldout))
    return model


def predicted_location_loss(model: GlimpseModel, k: int, images, labels):
    """Mean stage-``k`` cross-entropy at the model's own predicted locations."""
    r = run_batch(model, np.asarray(images, dtype=np.float64), k)
    lsm = log_softmax(r.low_logits + r.stage_logits.sum(axis=0) / k)
    return float(-lsm[np.arange(len(labels)), labels].mean())


def fine_tune(model: GlimpseModel, k: int, train_set: LabeledSet, hyper: TrainHyper,
              log: Log = None, heldout: Optional[LabeledSet] = None) -> GlimpseModel:
    """Update only stage ``k``'s glimpse net at its predicted locations."""
    cfg = model.config
    net = model.stage(k).net
    params = net.params()
    state = OptimizerState.for_params(params, hyper.lr, hyper.momentum)
    for epoch in range(hyper.fine_tune_epochs):
        total, count = 0.0, 0
        for images, labels in _iterate(train_set, hyper, 100 + k, epoch):
            ctx = _context(model, k, images, labels)
            x = foveal_batch(ctx.images, ctx.loc, cfg.patch_side, cfg.scales)
            h, o = mlp_forward(net, x)
            agg = ctx.o_L + (ctx.prior_sum + o) / k
            n = len(labels)
            loss = float(-log_softmax(agg)[np.arange(n), ctx.labels].mean())
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss while fine-tuning stage {k}")
            grads, _ = mlp_backward(net, x, h, cross_entropy_grad(agg, ctx.labels) / (n * k))
            sgd_momentum_step(params, grads, state)
            total += loss * n
            count += n
        if log:
            log(_epoch_line(f"{k}-finetune", epoch + 1, total / max(count, 1), model, k, heldout))
    return model


def train_full(model: GlimpseModel, train_set: LabeledSet, hyper: TrainHyper, log: Log = None,
               heldout: Optional[LabeledSet] = None, checkpoint: Optional[Callable] = None,
               fine_tune_last: bool = True) -> GlimpseModel:
    """Greedy schedule: N0+N1 jointly, then N2, N3, ... and a final fine-tune.

    ``checkpoint(name, model)`` is called after each stage and at the end.
    """
    g = model.config.num_glimpses
    if g == 0:
        train_low_res(model, train_set, hyper, log, heldout)
    for k in range(1, g + 1):
        train_stage(model, k, train_set, hyper, log, heldout)
        if checkpoint:
            checkpoint(f"stage{k}", model)
    if g and fine_tune_last and hyper.fine_tune_epochs:
        fine_tune(model, g, train_set, hyper, log, heldout)
    if checkpoint:
        checkpoint("final", model)
    return model
