"""Dense one-hidden-layer networks with hand-written backprop.

Everything works on float64 arrays. Inputs may be a single vector of shape
``(in,)`` or a batch of row vectors ``(n, in)``; outputs follow the same
leading shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional

import numpy as np


class ContractError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


ACTIVATIONS = ("relu", "sigmoid")


def sigmoid(a):
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


@dataclass
class Mlp:
    """Parameters of ``o = w2 @ act(w1 @ x + b1) + b2``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    hidden_activation: str = "relu"

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        hidden, _ = self.w1.shape
        out, hidden2 = self.w2.shape
        if self.b1.shape != (hidden,) or hidden2 != hidden or self.b2.shape != (out,):
            raise ContractError(
                f"inconsistent Mlp shapes: w1{self.w1.shape} b1{self.b1.shape} "
                f"w2{self.w2.shape} b2{self.b2.shape}"
            )
        if self.hidden_activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.hidden_activation!r}")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    def params(self) -> Dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "Mlp":
        return Mlp(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
                   self.hidden_activation)

    @classmethod
    def zeros(cls, in_dim, hidden_dim, out_dim, activation="relu") -> "Mlp":
        return cls(np.zeros((hidden_dim, in_dim)), np.zeros(hidden_dim),
                   np.zeros((out_dim, hidden_dim)), np.zeros(out_dim), activation)

    @classmethod
    def init(cls, in_dim, hidden_dim, out_dim, rng: np.random.Generator,
             activation="relu") -> "Mlp":
        # uniform +-1/sqrt(fan_in) weights, zero biases
        net = cls.zeros(in_dim, hidden_dim, out_dim, activation)
        net.w1[...] = uniform_init(rng, (hidden_dim, in_dim))
        net.w2[...] = uniform_init(rng, (out_dim, hidden_dim))
        return net


def uniform_init(rng: np.random.Generator, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(shape[-1])
    return rng.uniform(-bound, bound, size=shape)


def _activate(a, kind):
    if kind == "relu":
        return np.maximum(a, 0.0)
    return sigmoid(a)


def mlp_forward(net: Mlp, x):
    """Return ``(h, o)`` for input vector or row batch ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.in_dim:
        raise ContractError(f"input has {x.shape[-1]} features, net expects {net.in_dim}")
    h = _activate(x @ net.w1.T + net.b1, net.hidden_activation)
    o = h @ net.w2.T + net.b2
    return h, o


def mlp_backward(net: Mlp, x, h, grad_o, grad_h=None):
    """Backpropagate ``grad_o`` (and optionally an extra ``grad_h``).

    For batched input the parameter gradients are *summed* over rows.
    Returns ``(grads, grad_x)`` where grads is a dict keyed like ``net.params()``.
    """
    x = np.asarray(x, dtype=np.float64)
    grad_o = np.asarray(grad_o, dtype=np.float64)
    if grad_o.shape[-1] != net.out_dim or h.shape[-1] != net.hidden_dim:
        raise ContractError("gradient/hidden shapes do not match the net")
    if x.shape[-1] != net.in_dim or x.shape[:-1] != grad_o.shape[:-1]:
        raise ContractError("input shape does not match gradient batch")
    x2, h2, go2 = np.atleast_2d(x), np.atleast_2d(h), np.atleast_2d(grad_o)

    gh = go2 @ net.w2
    if grad_h is not None:
        gh = gh + np.atleast_2d(grad_h)
    if net.hidden_activation == "relu":
        ga = gh * (h2 > 0.0)  # subgradient 0 at exactly 0
    else:
        ga = gh * h2 * (1.0 - h2)

    grads = {
        "w1": ga.T @ x2,
        "b1": ga.sum(axis=0),
        "w2": go2.T @ h2,
        "b2": go2.sum(axis=0),
    }
    grad_x = ga @ net.w1
    if x.ndim == 1:
        grad_x = grad_x[0]
    return grads, grad_x


def softmax(o):
    o = np.asarray(o, dtype=np.float64)
    e = np.exp(o - o.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(o):
    o = np.asarray(o, dtype=np.float64)
    m = o.max(axis=-1, keepdims=True)
    return o - m - np.log(np.exp(o - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits, label):
    """``-log softmax(logits)[label]`` via log-sum-exp; broadcasts over rows."""
    logits = np.asarray(logits, dtype=np.float64)
    label = np.asarray(label)
    C = logits.shape[-1]
    if np.any(label < 0) or np.any(label >= C):
        raise ContractError(f"label {label} out of range for {C} classes")
    lsm = log_softmax(logits)
    if logits.ndim == 1:
        return float(-lsm[int(label)])
    return -np.take_along_axis(lsm, label.reshape(-1, 1), axis=-1)[:, 0]


def cross_entropy_grad(logits, label):
    """Gradient of :func:`cross_entropy` with respect to the logits."""
    g = softmax(logits)
    if g.ndim == 1:
        g[int(label)] -= 1.0
    else:
        g[np.arange(g.shape[0]), np.asarray(label)] -= 1.0
    return g


@dataclass
class OptimizerState:
    """Classical momentum: ``v <- momentum*v - lr*g; p <- p + v``."""

    learning_rate: float
    momentum: float = 0.9
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Dict[str, np.ndarray], learning_rate, momentum=0.9):
        return cls(learning_rate, momentum, {k: np.zeros_like(v) for k, v in params.items()})


def sgd_momentum_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                      state: OptimizerState) -> None:
    """Update ``params`` in place. Keys missing from ``grads`` are left alone."""
    for key, g in grads.items():
        p = params[key]
        if p.shape != g.shape:
            raise ContractError(f"gradient for {key} has shape {g.shape}, expected {p.shape}")
        v = state.velocity.get(key)
        if v is None:
            v = state.velocity[key] = np.zeros_like(p)
        v *= state.momentum
        v -= state.learning_rate * g
        p += v


def grad_check(loss_fn: Callable[[], float], params: Dict[str, np.ndarray],
               analytic: Dict[str, np.ndarray], epsilon=1e-5,
               max_coords: Optional[int] = None, seed=0) -> float:
    """Worst relative error between ``analytic`` and central differences.

    ``loss_fn`` takes no arguments and reads ``params`` (perturbed in place and
    restored). With ``max_coords`` set, each tensor is probed at a fixed
    pseudo-random subset of coordinates.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for key, p in params.items():
        flat = p.reshape(-1)
        ga = np.asarray(analytic[key]).reshape(-1)
        coords: Iterable[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            old = flat[i]
            flat[i] = old + epsilon
            lp = loss_fn()
            flat[i] = old - epsilon
            lm = loss_fn()
            flat[i] = old
            num = (lp - lm) / (2.0 * epsilon)
            worst = max(worst, relative_error(ga[i], num))
    return worst


def relative_error(a, b, floor=1e-6) -> float:
    # below the floor this is an absolute error; central differences carry ~1e-10 noise
    return float(abs(a - b) / max(abs(a), abs(b), floor))


def mac_count(in_dim: int, hidden_dim: int, out_dim: int) -> int:
    """Multiply-accumulates of the two weight-matrix products of one Mlp."""
    if min(in_dim, hidden_dim, out_dim) <= 0:
        raise ContractError("dimensions must be positive")
    return int(in_dim) * int(hidden_dim) + int(hidden_dim) * int(out_dim)
