"""Datasets: a synthetic grating task and balanced CIFAR-10 subsets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .autodiff import make_rng

CIFAR_RECORD = 1 + 3072


class DatasetError(OSError):
    """Missing or malformed dataset file."""


@dataclass
class DatasetSplit:
    images: np.ndarray  # [B, H, W, C] in [0, 1]
    labels: np.ndarray  # [B] int64
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)


def gen_synthetic(classes: int, per_class: int, image_size: int, seed: int,
                  channels: int = 3, noise: float = 0.1) -> DatasetSplit:
    """Class-dependent oriented gratings with phase jitter, color tint and noise.

    Class k uses orientation pi*k/classes and a frequency of 2 + (k % 2)
    cycles per image.  The phase jitter is limited to +-pi/3 so the class mean
    image keeps the pattern; the task is easy for a small ViT but not for a
    purely linear readout of raw pixels.
    """
    if min(classes, per_class, image_size, channels) < 1:
        raise ValueError("all sizes must be positive")
    rng = make_rng(seed)
    ys, xs = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")
    ys = ys / image_size
    xs = xs / image_size
    images = np.empty((classes * per_class, image_size, image_size, channels))
    labels = np.repeat(np.arange(classes), per_class)
    # tints depend on the class only, so datasets drawn with different seeds share one task
    tints = 0.5 + 0.5 * make_rng(7919 * classes + channels).random((classes, channels))
    for i, k in enumerate(labels):
        theta = math.pi * k / classes + rng.normal(0.0, 0.05)
        freq = 2.0 + (k % 2)
        phase = rng.uniform(-math.pi / 3, math.pi / 3)
        wave = np.sin(2 * math.pi * freq * (xs * math.cos(theta) + ys * math.sin(theta)) + phase)
        contrast = rng.uniform(0.6, 1.0)
        base = 0.5 + 0.4 * contrast * wave
        img = base[..., None] * tints[k] + rng.normal(0.0, noise, (image_size, image_size, channels))
        images[i] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(len(labels))
    return DatasetSplit(images[order], labels[order], classes)


def split(data: DatasetSplit, test_fraction: float, seed: int) -> tuple[DatasetSplit, DatasetSplit]:
    """Stratified train/test split."""
    rng = make_rng(seed)
    train_idx, test_idx = [], []
    for k in range(data.num_classes):
        idx = np.flatnonzero(data.labels == k)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(len(idx) * test_fraction))
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)
    return (DatasetSplit(data.images[train_idx], data.labels[train_idx], data.num_classes),
            DatasetSplit(data.images[test_idx], data.labels[test_idx], data.num_classes))


def resize_bilinear(images: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of [B, H, W, C] to size x size with corners aligned."""
    if images.shape[1] == size and images.shape[2] == size:
        return images
    zoom = (1.0, size / images.shape[1], size / images.shape[2], 1.0)
    out = ndimage.zoom(images, zoom, order=1, mode="nearest", grid_mode=False)
    return np.clip(out, 0.0, 1.0)


def read_cifar10_records(files) -> tuple[np.ndarray, np.ndarray]:
    """Decode CIFAR-10 binary batches: 1 label byte then 3072 bytes (R, G, B planes of 32x32)."""
    images, labels = [], []
    for f in files:
        try:
            raw = np.fromfile(f, dtype=np.uint8)
        except OSError as exc:
            raise DatasetError(f"cannot read {f}: {exc}") from exc
        if raw.size == 0 or raw.size % CIFAR_RECORD:
            raise DatasetError(f"{f}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
        rec = raw.reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
    return np.concatenate(images), np.concatenate(labels)


def load_cifar10_subset(path, per_class: int, seed: int, image_size: int | None = None,
                        train: bool = True) -> DatasetSplit:
    """Balanced subset of CIFAR-10 from the binary batch files under ``path``."""
    root = Path(path)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if train else ["test_batch.bin"]
    files = [root / n for n in names if (root / n).exists()]
    if not files:
        raise DatasetError(f"no CIFAR-10 batch files ({names[0]}, ...) under {root}")
    raw_images, labels = read_cifar10_records(files)
    if labels.max() > 9:
        raise DatasetError("label byte out of range 0..9")
    rng = make_rng(seed)
    chosen = []
    for k in range(10):
        idx = np.flatnonzero(labels == k)
        if len(idx) < per_class:
            raise DatasetError(f"class {k} has {len(idx)} records, need {per_class}")
        chosen.append(np.sort(rng.choice(idx, per_class, replace=False)))
    idx = np.concatenate(chosen)
    idx = idx[rng.permutation(len(idx))]
    images = raw_images[idx].astype(np.float64) / 255.0
    if image_size is not None:
        images = resize_bilinear(images, image_size)
    return DatasetSplit(images, labels[idx], 10)
