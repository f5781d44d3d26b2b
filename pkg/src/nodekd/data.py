"""Datasets: synthetic 2-D toys, IDX/CSV image loaders, normalization, augmentation."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace
from typing import Iterator, NamedTuple

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


class BadMagicError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class EmptyDatasetError(DataFormatError):
    pass


class CsvParseError(DataFormatError):
    pass


@dataclass
class Dataset:
    """Images in [0, 1] with shape (N, C, H, W) and integer labels in [0, num_classes)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])


# synthetic ------------------------------------------------------------------

def _moons(n, noise, rng):
    n0 = n // 2
    n1 = n - n0
    a = np.linspace(0, np.pi, n0)
    b = np.linspace(0, np.pi, n1)
    pts = np.concatenate([
        np.stack([np.cos(a), np.sin(a)], 1),
        np.stack([1 - np.cos(b), 0.5 - np.sin(b)], 1),
    ])
    labels = np.r_[np.zeros(n0, int), np.ones(n1, int)]
    return pts + noise * rng.normal(size=pts.shape), labels, 2


def _spirals(n, noise, rng, turns=1.5):
    # Archimedean twin spirals with outer radius 1; noise is relative to that radius
    n0 = n // 2
    r_max = 2 * np.pi * turns
    pts, labels = [], []
    for cls, m in enumerate((n0, n - n0)):
        theta = np.linspace(np.pi / 4, r_max, m)
        angle = theta + np.pi * cls
        r = theta / r_max
        pts.append(np.stack([r * np.cos(angle), r * np.sin(angle)], 1))
        labels.append(np.full(m, cls))
    pts = np.concatenate(pts)
    return pts + noise * rng.normal(size=pts.shape), np.concatenate(labels), 2


def _gaussians(n, noise, rng, classes):
    labels = np.arange(n) % classes
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = np.stack([np.cos(angles), np.sin(angles)], 1)
    pts = centers[labels] + max(noise, 1e-12) * rng.normal(size=(n, 2))
    return pts, labels, classes


def gen_synthetic(kind: str, n: int, noise: float = 0.0, seed: int = 0,
                  classes: int | None = None) -> Dataset:
    """Generate a 2-D toy problem, min-max scaled to [0, 1].

    Points are stored as 1-channel "images" of shape (1, 1, 2). Rows come in
    class-grouped order; shuffle with :func:`train_test_split`.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    if kind == "moons":
        pts, labels, k = _moons(n, noise, rng)
    elif kind == "spirals":
        pts, labels, k = _spirals(n, noise, rng)
    elif kind == "gaussians":
        pts, labels, k = _gaussians(n, noise, rng, classes or 3)
    else:
        raise ValueError(f"unknown synthetic dataset {kind!r}")
    lo, hi = pts.min(), pts.max()
    pts = (pts - lo) / (hi - lo)
    return Dataset(pts.reshape(n, 1, 1, 2), labels, k, name=kind, split="all")


def train_test_split(ds: Dataset, test_fraction: float = 0.25, seed: int = 0) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    test, train = perm[:n_test], perm[n_test:]
    return (replace(ds.subset(np.sort(train)), split="train"),
            replace(ds.subset(np.sort(test)), split="test"))


# IDX -------------------------------------------------------------------------

def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{what}: expected {n} bytes, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path, num_classes: int = 10, name: str | None = None) -> Dataset:
    """Load an IDX image/label file pair (uncompressed, big-endian headers)."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise BadMagicError(f"{images_path}: bad image magic {magic:#010x}")
        pixels = np.frombuffer(_read_exact(fh, count * rows * cols, "image data"), dtype=np.uint8)
    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise BadMagicError(f"{labels_path}: bad label magic {magic:#010x}")
        labels = np.frombuffer(_read_exact(fh, n_labels, "label data"), dtype=np.uint8)
    if n_labels != count:
        raise CountMismatchError(f"{count} images but {n_labels} labels")
    images = pixels.reshape(count, 1, rows, cols) / 255.0
    return Dataset(images, labels.astype(np.int64), num_classes,
                   name=name or os.path.basename(str(images_path)))


def save_idx(ds: Dataset, images_path, labels_path):
    """Write a single-channel dataset as an IDX pair; pixels are rounded to bytes."""
    n, c, h, w = ds.images.shape
    if c != 1:
        raise ValueError("IDX images must have one channel")
    pixels = np.clip(np.round(ds.images * 255), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


# CSV -------------------------------------------------------------------------

def load_csv(path, image_shape, num_classes: int | None = None, name: str | None = None) -> Dataset:
    """Rows of ``label, p0, p1, ...`` with pixels in [0, 1]."""
    image_shape = tuple(image_shape)
    width = int(np.prod(image_shape))
    labels, rows = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != width + 1:
                raise CsvParseError(f"{path}:{lineno}: expected {width + 1} columns, got {len(parts)}")
            try:
                labels.append(int(parts[0]))
                rows.append([float(p) for p in parts[1:]])
            except ValueError as exc:
                raise CsvParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise EmptyDatasetError(f"{path}: no rows")
    images = np.array(rows).reshape((len(rows),) + image_shape)
    if images.min() < 0 or images.max() > 1:
        raise CsvParseError(f"{path}: pixel values outside [0, 1]")
    labels = np.array(labels)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(images, labels, k, name=name or os.path.basename(str(path)))


def save_csv(ds: Dataset, path):
    with open(path, "w") as fh:
        for label, img in zip(ds.labels, ds.images.reshape(len(ds), -1)):
            fh.write(",".join([str(int(label))] + [repr(float(v)) for v in img]) + "\n")


# preprocessing -----------------------------------------------------------------

class ChannelStats(NamedTuple):
    mean: np.ndarray
    std: np.ndarray


def channel_stats(ds: Dataset, std_floor: float = 1e-6) -> ChannelStats:
    if not len(ds):
        raise EmptyDatasetError("cannot compute statistics of an empty dataset")
    mean = ds.images.mean(axis=(0, 2, 3))
    std = np.maximum(ds.images.std(axis=(0, 2, 3)), std_floor)
    return ChannelStats(mean, std)


def normalize(ds: Dataset, stats: ChannelStats | None = None) -> tuple[Dataset, ChannelStats]:
    """Per-channel standardization. Pass the train split's stats when normalizing test data."""
    stats = stats if stats is not None else channel_stats(ds)
    images = (ds.images - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
    return replace(ds, images=images), stats


def augment(images: np.ndarray, pad: int = 4, flip_prob: float = 0.5,
            rng: np.random.Generator | None = None, crop: bool = True) -> np.ndarray:
    """Random crop after zero-padding by ``pad`` and random horizontal flip."""
    rng = rng if rng is not None else np.random.default_rng(0)
    n, c, h, w = images.shape
    out = images.copy()
    if crop and pad > 0:
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, size=n)
        dx = rng.integers(0, 2 * pad + 1, size=n)
        for i in range(n):
            out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    if flip_prob > 0:
        flip = rng.random(n) < flip_prob
        out[flip] = out[flip, :, :, ::-1]
    return out


class Batch(NamedTuple):
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray


def batch_iter(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """Mini-batches over a permutation drawn from ``rng`` (original order if None)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(idx, ds.images[idx], ds.labels[idx])
