"""Image geometry: box downsampling, clamped crops and foveal stacks.

Images are 2-D float64 arrays indexed ``[row, col]``. Locations are normalized
``(x, y)`` pairs in [0, 1], with ``x`` running along columns.
"""

from __future__ import annotations

import numpy as np

from .nn import ContractError


def as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ContractError(f"expected a 2-D image, got shape {img.shape}")
    return img


def box_downsample(img, factor: int) -> np.ndarray:
    """Mean over non-overlapping ``factor x factor`` blocks.

    Works on a single image or a stack ``(..., H, W)``. Block pixels are summed
    in row-major order, so the result matches a naive loop bit for bit.
    """
    img = np.asarray(img, dtype=np.float64)
    if factor < 1:
        raise ContractError("factor must be >= 1")
    H, W = img.shape[-2:]
    if H % factor or W % factor:
        raise ContractError(f"image {H}x{W} not divisible by factor {factor}")
    if factor == 1:
        return img.copy()
    acc = np.zeros(img.shape[:-2] + (H // factor, W // factor))
    for i in range(factor):
        for j in range(factor):
            acc += img[..., i::factor, j::factor]
    return acc / (factor * factor)


def _round_half_up(v):
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(np.int64)


def to_pixel_center(loc, D: int):
    """Map normalized ``(x, y)`` to the pixel ``(row, col)`` on a ``D x D`` grid.

    ``loc`` may also be an array of shape ``(n, 2)``; then two int arrays come back.
    """
    if D < 1:
        raise ContractError("D must be >= 1")
    loc = np.asarray(loc, dtype=np.float64)
    row = np.clip(_round_half_up(loc[..., 1] * (D - 1)), 0, D - 1)
    col = np.clip(_round_half_up(loc[..., 0] * (D - 1)), 0, D - 1)
    if loc.ndim == 1:
        return int(row), int(col)
    return row, col


def window_origin(center, size: int, H: int, W: int):
    """Top-left corner of the ``size`` window centred on ``center``, kept inside."""
    row, col = center
    top = np.clip(np.asarray(row) - size // 2, 0, H - size)
    left = np.clip(np.asarray(col) - size // 2, 0, W - size)
    return top, left


def crop_clamped(img, center, size: int) -> np.ndarray:
    img = as_image(img)
    H, W = img.shape
    if size > min(H, W) or size < 1:
        raise ContractError(f"crop size {size} does not fit a {H}x{W} image")
    top, left = window_origin(center, size, H, W)
    top, left = int(top), int(left)
    return img[top:top + size, left:left + size].copy()


def crop_batch(images, rows, cols, size: int) -> np.ndarray:
    """Clamped crops for a stack ``(n, H, W)`` at per-image pixel centres."""
    images = np.asarray(images, dtype=np.float64)
    n, H, W = images.shape
    if size > min(H, W):
        raise ContractError(f"crop size {size} does not fit a {H}x{W} image")
    top, left = window_origin((rows, cols), size, H, W)
    r = top[:, None] + np.arange(size)
    c = left[:, None] + np.arange(size)
    return images[np.arange(n)[:, None, None], r[:, :, None], c[:, None, :]]


def foveal_extract(img, loc, w: int, scales: int) -> list:
    """Patches of side ``w*2**s`` around ``loc``, each averaged down to ``w x w``.

    Finest scale first.
    """
    img = as_image(img)
    D = min(img.shape)
    if w * 2 ** (scales - 1) > D:
        raise ContractError(f"{scales} scales of {w}px patches do not fit a {img.shape} image")
    H, W = img.shape
    row = int(np.clip(_round_half_up(loc[1] * (H - 1)), 0, H - 1))
    col = int(np.clip(_round_half_up(loc[0] * (W - 1)), 0, W - 1))
    return [box_downsample(crop_clamped(img, (row, col), w * 2 ** s), 2 ** s)
            for s in range(scales)]


def foveal_batch(images, locs, w: int, scales: int) -> np.ndarray:
    """Flattened foveal stacks ``(n, scales*w*w)`` for ``images[i]`` at ``locs[i]``.

    Layout per row: patch 0 row-major, then patch 1, and so on.
    """
    images = np.asarray(images, dtype=np.float64)
    n, H, W = images.shape
    if w * 2 ** (scales - 1) > min(H, W):
        raise ContractError(f"{scales} scales of {w}px patches do not fit {H}x{W} images")
    locs = np.asarray(locs, dtype=np.float64).reshape(n, 2)
    rows = np.clip(_round_half_up(locs[:, 1] * (H - 1)), 0, H - 1)
    cols = np.clip(_round_half_up(locs[:, 0] * (W - 1)), 0, W - 1)
    parts = []
    for s in range(scales):
        f = 2 ** s
        patch = box_downsample(crop_batch(images, rows, cols, w * f), f)
        parts.append(patch.reshape(n, w * w))
    return np.concatenate(parts, axis=1)
