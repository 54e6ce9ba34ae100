"""Reduced jittered-digit datasets for runs that fit on a laptop.

Digits come from the canonical MNIST IDX files when ``GLIMPSE_MNIST_DIR``
points at a directory holding them, and otherwise from the 5,000-digit MNIST
sample bundled with ``mlxtend`` (install the ``desk`` extra).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .data import JitterSpec, LabeledSet, make_jittered, read_idx

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def mnist_dir() -> Optional[Path]:
    d = os.environ.get("GLIMPSE_MNIST_DIR")
    if not d:
        return None
    d = Path(d)
    if all((d / f).is_file() for pair in MNIST_FILES.values() for f in pair):
        return d
    return None


def load_mnist(split: str) -> LabeledSet:
    d = mnist_dir()
    if d is None:
        raise FileNotFoundError("GLIMPSE_MNIST_DIR does not hold the four MNIST IDX files")
    images, labels = MNIST_FILES[split]
    return read_idx(d / images, d / labels)


def _bundled_sample() -> LabeledSet:
    from mlxtend.data import mnist_data
    X, y = mnist_data()
    return LabeledSet(X.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.int64))


def base_digits(n_train: int = 6000, n_test: int = 1000) -> Tuple[LabeledSet, LabeledSet, str]:
    """Unjittered train/test digits and a short description of their source.

    The bundled sample has 500 digits per class; when it is the source, the
    first ``n_train // 10`` of each class train and the next ``n_test // 10``
    test (capped at what exists).
    """
    if mnist_dir() is not None:
        train, test = load_mnist("train"), load_mnist("test")
        return (train.subset(np.arange(min(n_train, len(train)))),
                test.subset(np.arange(min(n_test, len(test)))), f"MNIST IDX in {mnist_dir()}")
    pool = _bundled_sample()
    per_train, per_test = n_train // 10, n_test // 10
    tr, te = [], []
    for c in range(10):
        idx = np.flatnonzero(pool.labels == c)
        k = min(per_train, len(idx) - min(per_test, len(idx) // 5))
        tr.append(idx[:k])
        te.append(idx[k:k + per_test])
    tr, te = np.sort(np.concatenate(tr)), np.sort(np.concatenate(te))
    return pool.subset(tr), pool.subset(te), "mlxtend MNIST sample"


@dataclass(frozen=True)
class DeskSpec:
    n_train: int = 6000
    n_test: int = 1000
    train_copies: int = 10
    test_copies: int = 3
    canvas: int = 48
    seed: int = 1


def desk_sets(spec: DeskSpec = DeskSpec()) -> Tuple[LabeledSet, LabeledSet, str]:
    """Jittered train and test sets; the test jitter uses ``seed + 1``."""
    train, test, source = base_digits(spec.n_train, spec.n_test)
    jtrain = make_jittered(train, JitterSpec(spec.canvas, spec.train_copies, spec.seed))
    jtest = make_jittered(test, JitterSpec(spec.canvas, spec.test_copies, spec.seed + 1))
    return jtrain, jtest, f"{source}: {len(train)} train x{spec.train_copies}, " \
                          f"{len(test)} test x{spec.test_copies}"
