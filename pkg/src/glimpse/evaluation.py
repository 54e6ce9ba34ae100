"""Error rates, cascade statistics, speed-ups and PGM visualisations."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .data import LabeledSet
from .imaging import box_downsample, foveal_extract
from .model import GlimpseModel, run_batch, run_flops
from .nn import ContractError, Mlp, mac_count


@dataclass
class EvalReport:
    error_rate: float
    rejection_rate: float
    per_stage_classified: List[float]
    per_stage_error: List[float]
    mean_flops: float
    speedup: float
    n_samples: int = 0
    baseline_flops: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def classified_error(self) -> float:
        """Errors among the samples that were not rejected."""
        kept = 1.0 - self.rejection_rate
        return self.error_rate / kept if kept > 0 else 0.0

    def lines(self) -> List[str]:
        """Machine-readable ``key=value`` lines."""
        out = [
            f"samples={self.n_samples}",
            f"error_rate={self.error_rate!r}",
            f"rejection_rate={self.rejection_rate!r}",
            f"classified_error={self.classified_error!r}",
            f"per_stage_classified={','.join(repr(v) for v in self.per_stage_classified)}",
            f"per_stage_error={','.join(repr(v) for v in self.per_stage_error)}",
            f"mean_flops={self.mean_flops!r}",
            f"baseline_flops={self.baseline_flops}",
            f"speedup={self.speedup!r}",
        ]
        out += [f"{k}={v}" for k, v in self.extra.items()]
        return out

    def table(self, title="this method") -> str:
        rows = [("Method", "Test Error Rate%", "Speed-Up"),
                (title, f"{100 * self.error_rate:.2f}", f"{self.speedup:.1f}")]
        if self.rejection_rate:
            rows.append(("  rejected%", f"{100 * self.rejection_rate:.2f}", ""))
        for k, (c, e) in enumerate(zip(self.per_stage_classified, self.per_stage_error)):
            name = "N0" if k == 0 else f"N{k}"
            rows.append((f"  decided by {name}", f"{100 * c:.2f}% (err {100 * e:.2f}%)", ""))
        w = [max(len(r[i]) for r in rows) for i in range(3)]
        return "\n".join(" | ".join(c.ljust(w[i]) for i, c in enumerate(r)).rstrip() for r in rows)


def baseline_fc_flops(D: int, hidden: int, classes: int) -> int:
    """MACs of a one-hidden-layer net on the full ``D x D`` image."""
    return mac_count(D * D, hidden, classes)


def geometry_flops(low_side: int, patch_side: int, scales: int, hidden: int, classes: int,
                   glimpses: int) -> int:
    """Per-image MACs of the pipeline from raw geometry, no model needed.

    Unlike :class:`~glimpse.model.ModelConfig` this does not require the
    low-resolution side to divide the image side.
    """
    n0 = mac_count(low_side ** 2, hidden, classes)
    stage = 2 * hidden + 2 * classes + mac_count(scales * patch_side ** 2, hidden, classes)
    return n0 + glimpses * stage


def geometry_speedup(full_side: int, low_side: int, patch_side: int, scales: int = 2,
                     hidden: int = 500, classes: int = 10, glimpses: int = 1) -> float:
    base = baseline_fc_flops(full_side, hidden, classes)
    return base / geometry_flops(low_side, patch_side, scales, hidden, classes, glimpses)


def _baseline(model: GlimpseModel) -> int:
    c = model.config
    return baseline_fc_flops(c.full_side, c.hidden, c.classes)


def _check_set(model, data: LabeledSet):
    D = model.config.full_side
    if data.images.shape[1:] != (D, D):
        raise ContractError(f"model expects {D}x{D} images, set has {data.images.shape[1:]}")


def _aggregates(model, data: LabeledSet, glimpses: int, chunk: int):
    out = []
    for i in range(0, len(data), chunk):
        out.append(run_batch(model, data.pixels(slice(i, i + chunk)), glimpses).aggregates)
    if not out:
        return np.zeros((glimpses + 1, 0, model.config.classes))
    return np.concatenate(out, axis=1)


def evaluate(model: GlimpseModel, data: LabeledSet, glimpses: Optional[int] = None,
             chunk: int = 1000) -> EvalReport:
    """Run every sample through N0 and ``glimpses`` glimpses."""
    _check_set(model, data)
    g = model.config.num_glimpses if glimpses is None else glimpses
    aggs = _aggregates(model, data, g, chunk)
    wrong = np.argmax(aggs[g], axis=1) != data.labels
    err = float(wrong.mean()) if len(data) else 0.0
    classified = [0.0] * (g + 1)
    stage_err = [0.0] * (g + 1)
    classified[g], stage_err[g] = 1.0, err
    flops = run_flops(model.config, g)
    base = _baseline(model)
    return EvalReport(err, 0.0, classified, stage_err, float(flops), base / flops, len(data), base)


def cascade_decisions(aggregates: np.ndarray, threshold: float, force_final: bool):
    """Stage index at which each sample stops (-1 = rejected) given all aggregates."""
    conf = aggregates.max(axis=2)                       # (stages, n)
    hit = conf >= threshold
    first = np.where(hit.any(axis=0), hit.argmax(axis=0), -1)
    if force_final:
        first = np.where(first < 0, aggregates.shape[0] - 1, first)
    return first


def evaluate_cascade(model: GlimpseModel, data: LabeledSet, threshold: float = 0.95,
                     force_final: bool = False, chunk: int = 1000) -> EvalReport:
    """Early-exit evaluation.

    All stages are computed in bulk and the exit point is chosen afterwards;
    this gives the same decisions as :func:`glimpse.model.run_cascaded` while
    FLOPs are charged only for the stages an early-exit run executes.
    """
    _check_set(model, data)
    cfg = model.config
    G = cfg.num_glimpses
    n = len(data)
    aggs = _aggregates(model, data, G, chunk)
    stop = cascade_decisions(aggs, threshold, force_final)
    preds = np.argmax(aggs, axis=2)                     # (G+1, n)
    decided = stop >= 0
    pred = np.where(decided, preds[np.clip(stop, 0, G), np.arange(n)], -1)
    wrong = decided & (pred != data.labels)
    executed = np.where(decided, stop, G)
    flops = run_flops(cfg, 0) + executed * (run_flops(cfg, 1) - run_flops(cfg, 0))
    classified, stage_err = [], []
    for k in range(G + 1):
        at = stop == k
        classified.append(float(at.mean()) if n else 0.0)
        stage_err.append(float(wrong[at].mean()) if at.any() else 0.0)
    mean_flops = float(flops.mean()) if n else float(run_flops(cfg, 0))
    base = _baseline(model)
    return EvalReport(float(wrong.mean()) if n else 0.0, float((~decided).mean()) if n else 0.0,
                      classified, stage_err, mean_flops, base / mean_flops, n, base,
                      {"threshold": repr(float(threshold)), "force_final": int(force_final)})


# ---------------------------------------------------------------- PGM

def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    try:
        with open(path, "wb") as f:
            f.write(b"P5\n%d %d\n255\n" % (w, h))
            f.write(np.ascontiguousarray(pixels).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write PGM {path}: {exc}") from exc


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    head = buf.split(b"\n", 3)
    if head[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, head[1].split())
    return np.frombuffer(head[3], dtype=np.uint8, count=w * h).reshape(h, w)


def _normalize_tile(t: np.ndarray) -> np.ndarray:
    lo, hi = t.min(), t.max()
    if hi == lo:
        return np.full(t.shape, 128, dtype=np.uint8)
    return np.floor((t - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def filter_grid(net: Mlp, tile_rows: int, tile_cols: int, scales: int = 1) -> List[np.ndarray]:
    """One tiled uint8 image per scale block of the first-layer weights."""
    in_dim = net.in_dim
    if in_dim % scales:
        raise ContractError(f"input dim {in_dim} not divisible into {scales} blocks")
    side = int(round(np.sqrt(in_dim // scales)))
    if side * side * scales != in_dim:
        raise ContractError(f"input dim {in_dim} is not {scales} square blocks")
    shown = min(net.hidden_dim, tile_rows * tile_cols)
    H = tile_rows * (side + 1) - 1
    W = tile_cols * (side + 1) - 1
    blocks = []
    for s in range(scales):
        canvas = np.zeros((H, W), dtype=np.uint8)
        for u in range(shown):
            r, c = divmod(u, tile_cols)
            w = net.w1[u, s * side * side:(s + 1) * side * side].reshape(side, side)
            canvas[r * (side + 1):r * (side + 1) + side,
                   c * (side + 1):c * (side + 1) + side] = _normalize_tile(w)
        blocks.append(canvas)
    return blocks


def dump_filters(net: Mlp, tile_rows: int, tile_cols: int, out_path, scales: int = 1) -> List[Path]:
    """Write first-layer filters as PGM; extra scale blocks go to ``<stem>-scale<s>.pgm``."""
    out_path = Path(out_path)
    paths = []
    for s, block in enumerate(filter_grid(net, tile_rows, tile_cols, scales)):
        p = out_path if s == 0 else out_path.with_name(f"{out_path.stem}-scale{s}{out_path.suffix}")
        write_pgm(p, block)
        paths.append(p)
    return paths


def select_disagreements(model: GlimpseModel, data: LabeledSet, n_examples: int) -> np.ndarray:
    """Indices where N0 and the final prediction disagree most (L1 distance)."""
    g = model.config.num_glimpses
    aggs = _aggregates(model, data, g, 1000)
    score = np.abs(aggs[0] - aggs[g]).sum(axis=1)
    return np.argsort(-score, kind="stable")[:n_examples]


def _cell(img: np.ndarray, D: int) -> np.ndarray:
    f = max(1, D // img.shape[0])
    big = np.kron(img, np.ones((f, f)))[:D, :D]
    out = np.zeros((D, D))
    out[:big.shape[0], :big.shape[1]] = big
    return out


def dump_traces(model: GlimpseModel, data: LabeledSet, n_examples: int, out_path):
    """Composite PGM (one row per example) plus a ``.txt`` sidecar.

    Columns: original image, N0 input, then each glimpse's finest patch.
    Returns ``(image_path or None, sidecar_path, indices)``.
    """
    _check_set(model, data)
    out_path = Path(out_path)
    sidecar = out_path.with_suffix(".txt")
    idx = select_disagreements(model, data, n_examples) if n_examples > 0 else np.zeros(0, int)
    cfg = model.config
    D, g = cfg.full_side, cfg.num_glimpses
    lines, rows = [], []
    if len(idx):
        r = run_batch(model, data.pixels(idx), g)
    for j, i in enumerate(idx):
        img = data.pixels(int(i))
        preds = [int(np.argmax(r.aggregates[k, j])) for k in range(g + 1)]
        parts = [f"index={int(i)}", f"label={int(data.labels[i])}", f"n0={preds[0]}"]
        cells = [img, _cell(box_downsample(img, D // cfg.low_side), D)]
        for k in range(g):
            loc = r.locations[k, j]
            parts.append(f"stage{k + 1}={preds[k + 1]}")
            parts.append(f"loc{k + 1}={float(loc[0])!r},{float(loc[1])!r}")
            patch = foveal_extract(img, loc, cfg.patch_side, cfg.scales)[0]
            cells.append(_cell(patch, D))
        lines.append(" ".join(parts))
        row = np.ones((D, len(cells) * (D + 1) - 1))
        for c, cell in enumerate(cells):
            row[:, c * (D + 1):c * (D + 1) + D] = cell
        rows.append(row)
    try:
        sidecar.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write trace sidecar {sidecar}: {exc}") from exc
    if not rows:
        return None, sidecar, idx
    sep = np.ones((1, rows[0].shape[1]))
    stacked = np.concatenate([x for row in rows for x in (row, sep)][:-1], axis=0)
    write_pgm(out_path, np.floor(np.clip(stacked, 0, 1) * 255 + 0.5))
    return out_path, sidecar, idx


def parse_trace_sidecar(path) -> List[dict]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        rec = {}
        for item in line.split():
            k, v = item.split("=", 1)
            if k.startswith("loc"):
                rec[k] = tuple(float(t) for t in v.split(","))
            else:
                rec[k] = int(v)
        out.append(rec)
    return out
