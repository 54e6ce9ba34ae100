"""Sequential glimpse classifier: low-resolution net, location predictors,
glimpse nets and geometric-mean aggregation, plus FLOP accounting.

Stages are numbered from 1 in every public function (stage ``n`` lives in
``model.stages[n - 1]``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from .imaging import box_downsample, foveal_batch
from .nn import ContractError, Mlp, mac_count, mlp_forward, sigmoid, softmax, uniform_init

MAGIC = b"GLM1"
REJECT = -1


@dataclass(frozen=True)
class ModelConfig:
    full_side: int = 48
    low_side: int = 12
    patch_side: int = 12
    scales: int = 2
    classes: int = 10
    hidden: int = 500
    num_glimpses: int = 2
    weight_sharing: bool = False

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "weight_sharing" and (not isinstance(v, (int, np.integer)) or v < 0):
                raise ContractError(f"{f.name} must be a non-negative integer, got {v!r}")
        if min(self.full_side, self.low_side, self.patch_side, self.scales,
               self.classes, self.hidden) < 1:
            raise ContractError("sizes must be positive")
        if self.full_side % self.low_side:
            raise ContractError(f"low_side {self.low_side} must divide full_side {self.full_side}")
        if self.patch_side * 2 ** (self.scales - 1) > self.full_side:
            raise ContractError("coarsest glimpse scale does not fit the image")

    @property
    def low_in(self) -> int:
        return self.low_side ** 2

    @property
    def glimpse_in(self) -> int:
        return self.scales * self.patch_side ** 2


@dataclass
class LocPredictor:
    """``l = sigmoid(w_h @ h_L + w_o @ s + b)``, with ``s`` the summed logits."""

    w_h: np.ndarray
    w_o: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w_h = np.asarray(self.w_h, dtype=np.float64)
        self.w_o = np.asarray(self.w_o, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w_h.shape[0] != 2 or self.w_o.shape[0] != 2 or self.b.shape != (2,):
            raise ContractError("location predictor must have exactly 2 outputs")

    def params(self):
        return {"w_h": self.w_h, "w_o": self.w_o, "b": self.b}

    def copy(self):
        return LocPredictor(self.w_h.copy(), self.w_o.copy(), self.b.copy())

    @classmethod
    def zeros(cls, hidden, classes):
        return cls(np.zeros((2, hidden)), np.zeros((2, classes)), np.zeros(2))


@dataclass
class GlimpseStage:
    net: Mlp
    loc: LocPredictor


@dataclass
class GlimpseModel:
    config: ModelConfig
    n0: Mlp
    stages: List[GlimpseStage] = field(default_factory=list)

    def __post_init__(self):
        cfg = self.config
        if len(self.stages) != cfg.num_glimpses:
            raise ContractError(f"{len(self.stages)} stages for num_glimpses={cfg.num_glimpses}")
        if (self.n0.in_dim, self.n0.hidden_dim, self.n0.out_dim) != (cfg.low_in, cfg.hidden, cfg.classes):
            raise ContractError("low-resolution net does not match config")
        for st in self.stages:
            if (st.net.in_dim, st.net.hidden_dim, st.net.out_dim) != (cfg.glimpse_in, cfg.hidden, cfg.classes):
                raise ContractError("glimpse net does not match config")
            if st.loc.w_h.shape != (2, cfg.hidden) or st.loc.w_o.shape != (2, cfg.classes):
                raise ContractError("location predictor does not match config")
        if cfg.weight_sharing and self.stages:
            shared = self.stages[0].net
            for st in self.stages[1:]:
                st.net = shared

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "GlimpseModel":
        from .data import make_rng

        rng = make_rng(seed)
        c = config
        n0 = Mlp.init(c.low_in, c.hidden, c.classes, rng)
        stages = []
        for k in range(c.num_glimpses):
            if c.weight_sharing and k > 0:
                net = stages[0].net
            else:
                net = Mlp.init(c.glimpse_in, c.hidden, c.classes, rng)
            fan_in = c.hidden + c.classes
            bound = 1.0 / np.sqrt(fan_in)
            loc = LocPredictor(rng.uniform(-bound, bound, (2, c.hidden)),
                               rng.uniform(-bound, bound, (2, c.classes)), np.zeros(2))
            stages.append(GlimpseStage(net, loc))
        return cls(config, n0, stages)

    def stage(self, n: int) -> GlimpseStage:
        if not 1 <= n <= len(self.stages):
            raise ContractError(f"stage {n} outside 1..{len(self.stages)}")
        return self.stages[n - 1]

    def tensors(self):
        """All parameter tensors in serialization order, as (name, array)."""
        out = [(f"n0.{k}", v) for k, v in self.n0.params().items()]
        for i, st in enumerate(self.stages, 1):
            out += [(f"stage{i}.net.{k}", v) for k, v in st.net.params().items()]
            out += [(f"stage{i}.loc.{k}", v) for k, v in st.loc.params().items()]
        return out

    def copy(self) -> "GlimpseModel":
        return from_bytes(to_bytes(self))


@dataclass
class GlimpseTrace:
    """Everything one forward run produced for a single image."""

    low_logits: np.ndarray
    locations: list
    stage_logits: list
    aggregates: list
    flops: int
    decided_at: Optional[int] = None  # stage index, 0 = N0; None means rejected
    label: int = REJECT

    @property
    def rejected(self) -> bool:
        return self.decided_at is None


# ---------------------------------------------------------------- FLOPs

def n0_flops(cfg: ModelConfig) -> int:
    return mac_count(cfg.low_in, cfg.hidden, cfg.classes)


def loc_flops(cfg: ModelConfig) -> int:
    return 2 * cfg.hidden + 2 * cfg.classes


def glimpse_flops(cfg: ModelConfig) -> int:
    return mac_count(cfg.glimpse_in, cfg.hidden, cfg.classes)


def stage_flops(cfg: ModelConfig) -> int:
    return loc_flops(cfg) + glimpse_flops(cfg)


def run_flops(cfg: ModelConfig, glimpses: int) -> int:
    return n0_flops(cfg) + glimpses * stage_flops(cfg)


# ------------------------------------------------------------ inference

def _check_images(model, images):
    D = model.config.full_side
    if images.shape[-2:] != (D, D):
        raise ContractError(f"expected {D}x{D} images, got {images.shape[-2:]}")


def n0_forward(model: GlimpseModel, img):
    """``(h_L, o_L, y_L)`` for one image ``(D, D)`` or a stack ``(n, D, D)``."""
    img = np.asarray(img, dtype=np.float64)
    _check_images(model, img)
    cfg = model.config
    low = box_downsample(img, cfg.full_side // cfg.low_side)
    x = low.reshape(low.shape[:-2] + (cfg.low_in,))
    h, o = mlp_forward(model.n0, x)
    return h, o, softmax(o)


def loc_input(o_L, prior_logits):
    s = np.array(o_L, dtype=np.float64)
    for o in prior_logits:
        s = s + o
    return s


def predict_location(model: GlimpseModel, n: int, h_L, o_L, prior_logits=()):
    """Normalized ``(x, y)`` for stage ``n`` from N0 features and earlier logits."""
    prior_logits = list(prior_logits)
    if n < 1 or len(prior_logits) != n - 1:
        raise ContractError(f"stage {n} needs {n - 1} prior logit vectors, got {len(prior_logits)}")
    lp = model.stage(n).loc
    s = loc_input(o_L, prior_logits)
    return sigmoid(h_L @ lp.w_h.T + s @ lp.w_o.T + lp.b)


def glimpse_input(model: GlimpseModel, images, locs):
    cfg = model.config
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 2
    if single:
        images, locs = images[None], np.asarray(locs)[None]
    x = foveal_batch(images, locs, cfg.patch_side, cfg.scales)
    return x[0] if single else x


def glimpse_forward(model: GlimpseModel, n: int, img, loc):
    """Stage ``n`` logits for the foveal stack at ``loc``."""
    loc = np.asarray(loc, dtype=np.float64)
    if np.any(loc < 0) or np.any(loc > 1):
        raise ContractError(f"location {loc} outside [0, 1]^2")
    _, o = mlp_forward(model.stage(n).net, glimpse_input(model, img, loc))
    return o


def aggregate(o_L, glimpse_logits):
    """``softmax(o_L + mean(glimpse_logits))``."""
    glimpse_logits = list(glimpse_logits)
    if not glimpse_logits:
        raise ContractError("aggregate needs at least one glimpse")
    return softmax(np.asarray(o_L) + sum(glimpse_logits) / len(glimpse_logits))


@dataclass
class BatchRun:
    """Arrays from running every image in a stack through the first stages."""

    h_L: np.ndarray            # (n, hidden)
    low_logits: np.ndarray     # (n, C)
    locations: np.ndarray      # (g, n, 2)
    stage_logits: np.ndarray   # (g, n, C)
    aggregates: np.ndarray     # (g + 1, n, C); index 0 is softmax(o_L)


def run_batch(model: GlimpseModel, images, max_glimpses: int) -> BatchRun:
    if not 0 <= max_glimpses <= model.config.num_glimpses:
        raise ContractError(f"max_glimpses must be in 0..{model.config.num_glimpses}")
    images = np.asarray(images, dtype=np.float64)
    h_L, o_L, y_L = n0_forward(model, images)
    n, C = o_L.shape
    locs = np.zeros((max_glimpses, n, 2))
    logits = np.zeros((max_glimpses, n, C))
    aggs = [y_L]
    for k in range(1, max_glimpses + 1):
        locs[k - 1] = predict_location(model, k, h_L, o_L, list(logits[:k - 1]))
        _, logits[k - 1] = mlp_forward(model.stage(k).net, glimpse_input(model, images, locs[k - 1]))
        aggs.append(aggregate(o_L, logits[:k]))
    return BatchRun(h_L, o_L, locs, logits, np.stack(aggs))


def run(model: GlimpseModel, img, max_glimpses: Optional[int] = None) -> GlimpseTrace:
    g = model.config.num_glimpses if max_glimpses is None else max_glimpses
    img = np.asarray(img, dtype=np.float64)
    r = run_batch(model, img[None], g)
    trace = GlimpseTrace(
        low_logits=r.low_logits[0],
        locations=[r.locations[k, 0] for k in range(g)],
        stage_logits=[r.stage_logits[k, 0] for k in range(g)],
        aggregates=[r.aggregates[k + 1, 0] for k in range(g)],
        flops=run_flops(model.config, g),
        decided_at=g,
    )
    final = r.aggregates[g, 0]
    trace.label = int(np.argmax(final))
    return trace


def run_cascaded(model: GlimpseModel, img, threshold: float, force_final: bool = True):
    """Early-exit inference; returns ``(label or REJECT, trace)``.

    Stops after N0 or after any glimpse once the current aggregate's top
    probability reaches ``threshold``.
    """
    if not 0.0 <= threshold:
        raise ContractError("threshold must be non-negative")
    cfg = model.config
    img = np.asarray(img, dtype=np.float64)
    h_L, o_L, y = n0_forward(model, img)
    trace = GlimpseTrace(o_L, [], [], [], n0_flops(cfg))
    k = 0
    while True:
        if y.max() >= threshold:
            trace.decided_at, trace.label = k, int(np.argmax(y))
            return trace.label, trace
        if k == cfg.num_glimpses:
            break
        k += 1
        loc = predict_location(model, k, h_L, o_L, trace.stage_logits)
        o = glimpse_forward(model, k, img, loc)
        trace.locations.append(loc)
        trace.stage_logits.append(o)
        y = aggregate(o_L, trace.stage_logits)
        trace.aggregates.append(y)
        trace.flops += stage_flops(cfg)
    if force_final:
        trace.decided_at, trace.label = k, int(np.argmax(y))
    return trace.label, trace


# -------------------------------------------------------- serialization

_CONFIG_ORDER = ("full_side", "low_side", "patch_side", "scales", "classes",
                 "hidden", "num_glimpses", "weight_sharing")


def to_bytes(model: GlimpseModel) -> bytes:
    cfg = model.config
    parts = [MAGIC, struct.pack("<8i", *(int(getattr(cfg, k)) for k in _CONFIG_ORDER))]
    for _, t in model.tensors():
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> GlimpseModel:
    if buf[:4] != MAGIC:
        raise ContractError(f"not a GLM1 model (magic {buf[:4]!r})")
    if len(buf) < 36:
        raise ContractError("truncated GLM1 header")
    vals = struct.unpack("<8i", buf[4:36])
    cfg = ModelConfig(**{k: (bool(v) if k == "weight_sharing" else v)
                         for k, v in zip(_CONFIG_ORDER, vals)})
    shapes = _tensor_shapes(cfg)
    need = 36 + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(buf) != need:
        raise ContractError(f"GLM1 body has {len(buf)} bytes, config implies {need}")
    pos, arrays = 36, []
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(s).astype(np.float64))
        pos += 8 * size
    it = iter(arrays)
    n0 = Mlp(next(it), next(it), next(it), next(it))
    stages = []
    for k in range(cfg.num_glimpses):
        net = Mlp(next(it), next(it), next(it), next(it))
        loc = LocPredictor(next(it), next(it), next(it))
        if cfg.weight_sharing and k > 0:
            if not all(np.array_equal(a, b) for a, b in zip(net.params().values(),
                                                           stages[0].net.params().values())):
                raise ContractError("weight-shared model has differing stage nets")
            net = stages[0].net
        stages.append(GlimpseStage(net, loc))
    return GlimpseModel(cfg, n0, stages)


def _tensor_shapes(cfg: ModelConfig):
    H, C = cfg.hidden, cfg.classes
    shapes = [(H, cfg.low_in), (H,), (C, H), (C,)]
    for _ in range(cfg.num_glimpses):
        shapes += [(H, cfg.glimpse_in), (H,), (C, H), (C,), (2, H), (2, C), (2,)]
    return shapes


def save(model: GlimpseModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path) -> GlimpseModel:
    return from_bytes(Path(path).read_bytes())
