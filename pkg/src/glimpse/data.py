"""IDX reading/writing, jittered MNIST synthesis and minibatch ordering.

Randomness comes from numpy's PCG64 bit generator (O'Neill's permuted
congruential generator, 128-bit state, XSL-RR output), seeded through
``SeedSequence``. Both are specified independently of numpy, so the streams
are reproducible across platforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ContractError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


def make_rng(*seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(seed))))


@dataclass
class LabeledSet:
    """Images ``(n, H, W)`` and integer labels ``(n,)``.

    ``images`` is usually uint8 (bytes 0..255 standing for 0..1, as stored on
    disk); float arrays are taken to be in [0, 1] already.
    """

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 3:
            raise ContractError(f"images must be (n, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def side(self) -> int:
        return self.images.shape[1]

    def pixels(self, idx=slice(None)) -> np.ndarray:
        """Float64 images in [0, 1] for the given index/indices."""
        x = self.images[idx]
        if x.dtype == np.uint8:
            return x / 255.0
        return np.asarray(x, dtype=np.float64)

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(self.images[idx], self.labels[idx])


def _read_exact(buf: bytes, offset: int, n: int, path) -> bytes:
    if offset + n > len(buf):
        raise IdxFormatError(f"{path}: truncated file ({len(buf)} bytes, need {offset + n})")
    return buf[offset:offset + n]


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, = struct.unpack(">I", _read_exact(buf, 0, 4, path))
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
    n, rows, cols = struct.unpack(">III", _read_exact(buf, 4, 12, path))
    body = _read_exact(buf, 16, n * rows * cols, path)
    return np.frombuffer(body, dtype=np.uint8).reshape(n, rows, cols).copy()


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, = struct.unpack(">I", _read_exact(buf, 0, 4, path))
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
    n, = struct.unpack(">I", _read_exact(buf, 4, 4, path))
    return np.frombuffer(_read_exact(buf, 8, n, path), dtype=np.uint8).copy()


def read_idx(images_path, labels_path) -> LabeledSet:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(
            f"count mismatch: {images_path} has {len(images)} images, "
            f"{labels_path} has {len(labels)} labels")
    return LabeledSet(images, labels.astype(np.int64))


def to_bytes(images) -> np.ndarray:
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return images
    return np.clip(np.floor(images * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_idx(data: LabeledSet, images_path, labels_path) -> None:
    images = to_bytes(data.images)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(np.ascontiguousarray(images).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(data.labels.astype(np.uint8).tobytes())


@dataclass(frozen=True)
class JitterSpec:
    canvas: int = 48
    copies_per_image: int = 10
    seed: int = 0


def make_jittered(src: LabeledSet, spec: JitterSpec) -> LabeledSet:
    """Paste every source image ``copies_per_image`` times onto a zero canvas.

    Output ``i * copies + c`` is copy ``c`` of source ``i``; offsets are uniform
    over all top-left positions that keep the digit fully inside.
    """
    n, h, w = src.images.shape
    if spec.canvas < max(h, w):
        raise ContractError(f"canvas {spec.canvas} smaller than source {h}x{w}")
    if spec.copies_per_image < 1:
        raise ContractError("copies_per_image must be >= 1")
    k = spec.copies_per_image
    rng = make_rng(spec.seed)
    offsets = rng.integers(0, [spec.canvas - h + 1, spec.canvas - w + 1], size=(n * k, 2))
    out = np.zeros((n * k, spec.canvas, spec.canvas), dtype=src.images.dtype)
    rr = offsets[:, 0, None, None] + np.arange(h)[None, :, None]
    cc = offsets[:, 1, None, None] + np.arange(w)[None, None, :]
    out[np.arange(n * k)[:, None, None], rr, cc] = np.repeat(src.images, k, axis=0)
    return LabeledSet(out, np.repeat(src.labels, k))


def batches(n_items: int, batch_size: int, shuffle_seed: int, epoch: int) -> list:
    """Seeded permutation of ``range(n_items)`` cut into consecutive batches."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = make_rng(shuffle_seed, epoch).permutation(n_items)
    return [order[i:i + batch_size] for i in range(0, n_items, batch_size)]
