"""Datasets: the CIFAR binary format and a deterministic synthetic fallback.

CIFAR files are the standard 3073-byte records (1 label byte, then 3072
pixel bytes as 3x32x32 planes). They are user-supplied paths; nothing here
downloads anything. The synthetic dataset is the default for the offline
test suite: class-conditioned colored shapes, easy enough that the LeNet
baseline exceeds 90% accuracy within a few epochs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .rng import Rng

_REC = 3073
_PALETTE = np.array([
    [0.95, 0.25, 0.20], [0.20, 0.85, 0.25], [0.25, 0.35, 0.95],
    [0.95, 0.90, 0.20], [0.90, 0.25, 0.90], [0.20, 0.90, 0.90],
    [0.95, 0.60, 0.20], [0.55, 0.95, 0.55], [0.60, 0.40, 0.95],
    [0.95, 0.95, 0.95],
])


@dataclass
class Dataset:
    images: np.ndarray  # (n, 3, H, W) in [0, 1]
    labels: np.ndarray  # (n,) integer classes
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("image/label count mismatch")

    def __len__(self):
        return self.images.shape[0]

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, n: int, offset: int = 0) -> "Dataset":
        sl = slice(offset, offset + n)
        return Dataset(self.images[sl], self.labels[sl], self.split)


class DatasetError(ValueError):
    pass


def load_cifar(path: str, split: str = "train", classes: int = 10) -> Dataset:
    """Parse one or more CIFAR binary batch files.

    `path` may be a single .bin file or a directory holding the standard
    data_batch_*.bin / test_batch.bin names.
    """
    if os.path.isdir(path):
        if split == "train":
            names = sorted(f for f in os.listdir(path) if f.startswith("data_batch"))
        else:
            names = [f for f in os.listdir(path) if f.startswith("test_batch")]
        if not names:
            raise DatasetError(f"no CIFAR batch files for split {split!r} under {path}")
        files = [os.path.join(path, n) for n in names]
    else:
        files = [path]

    images, labels = [], []
    for fname in files:
        raw = np.fromfile(fname, dtype=np.uint8)
        if raw.size == 0 or raw.size % _REC:
            at = (raw.size // _REC) * _REC
            raise DatasetError(f"{fname}: truncated CIFAR file, {raw.size} bytes "
                               f"(record boundary at offset {at})")
        recs = raw.reshape(-1, _REC)
        lab = recs[:, 0].astype(np.int64)
        bad = np.nonzero(lab >= classes)[0]
        if bad.size:
            raise DatasetError(f"{fname}: label {int(lab[bad[0]])} out of range "
                               f"at record {int(bad[0])}")
        images.append(recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
        labels.append(lab)
    return Dataset(np.concatenate(images), np.concatenate(labels), split)


def synth_dataset(n: int, classes: int = 10, size: int = 32, seed: int = 0,
                  split: str = "train") -> Dataset:
    """Colored-shape classification fixture: each class owns a grid position
    and palette color; squares for the first nine classes, a disk for the
    tenth slot of each cycle. Position, scale, and brightness jitter plus
    pixel noise keep it from being trivially memorizable."""
    if n < classes:
        raise DatasetError("need at least one sample per class")
    rng = Rng(seed).child(0xDA7A if split == "train" else 0x7E57)
    labels = np.arange(n) % classes  # balanced within +-1
    order = rng.permutation(n)
    labels = labels[order].astype(np.int64)

    cell = size // 4
    centers = [(cell * (1 + p % 3), cell * (1 + p // 3)) for p in range(9)]
    yy, xx = np.mgrid[0:size, 0:size]
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for i in range(n):
        c = int(labels[i])
        base = 0.08 + 0.06 * float(rng.uniform(0.0, 1.0))
        img = np.full((3, size, size), base, dtype=np.float32)
        pos = centers[c % 9]
        cx = pos[0] + int(rng.integers(-2, 3))
        cy = pos[1] + int(rng.integers(-2, 3))
        r = max(2, cell // 2 + int(rng.integers(-1, 2)))
        color = _PALETTE[c % len(_PALETTE)] * float(rng.uniform(0.75, 1.0))
        if (c // 9) % 2 == 0:
            mask = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
        else:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        for ch in range(3):
            img[ch][mask] = color[ch]
        img += rng.gaussian((3, size, size), dtype=np.float32) * 0.02
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, split)


def minibatches(dataset: Dataset, batch_size: int, rng: Rng | None = None,
                drop_last: bool = True):
    """Yield (images, labels) batches, shuffled when an rng is given."""
    n = len(dataset)
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - (n % batch_size) if drop_last else n
    for start in range(0, stop, batch_size):
        take = idx[start:start + batch_size]
        yield dataset.images[take], dataset.labels[take]
