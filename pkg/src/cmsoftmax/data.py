"""IDX (MNIST) loading, mini-batch iteration and synthetic quality-tagged blobs."""
from __future__ import annotations

import csv
import gzip
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConsistencyError, DimensionError, DomainError, FormatError, TruncatedFileError
from .rng import Xoshiro256

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MNIST_TRAIN_SIZE = 50_000

QUALITY_GOOD = "good"
QUALITY_LOW = "low"
QUALITY_UNKNOWN = "unknown"


@dataclass
class Dataset:
    images: np.ndarray  # [n, 1, h, w], float64
    labels: np.ndarray  # [n], int64
    class_count: int
    quality: np.ndarray | None = None  # [n] of "good" / "low" / "unknown"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.images.ndim != 4 or self.images.shape[0] != n:
            raise ConsistencyError(f"images {self.images.shape} inconsistent with {n} labels")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConsistencyError(f"labels must lie in [0, {self.class_count})")
        if self.quality is not None:
            self.quality = np.asarray(self.quality, dtype=object)
            if self.quality.shape != (n,):
                raise ConsistencyError("quality tags must have one entry per sample")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.images.shape[1:]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        q = None if self.quality is None else self.quality[index]
        return Dataset(self.images[index], self.labels[index], self.class_count, q)


# --------------------------------------------------------------------------
# IDX files
# --------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _header(buf: bytes, path, count: int) -> tuple[int, ...]:
    need = 4 * count
    if len(buf) < need:
        raise TruncatedFileError(f"{path}: header truncated ({len(buf)} of {need} bytes)")
    return struct.unpack(f">{count}I", buf[:need])


def read_idx_images(path) -> np.ndarray:
    """Raw uint8 images [n, h, w]."""
    buf = _read_bytes(path)
    (magic,) = _header(buf, path, 1)
    if magic != IMAGES_MAGIC:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")
    _, n, h, w = _header(buf, path, 4)
    payload = buf[16:]
    if len(payload) < n * h * w:
        raise TruncatedFileError(f"{path}: expected {n * h * w} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=n * h * w).reshape(n, h, w)


def read_idx_labels(path) -> np.ndarray:
    buf = _read_bytes(path)
    (magic,) = _header(buf, path, 1)
    if magic != LABELS_MAGIC:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")
    _, n = _header(buf, path, 2)
    payload = buf[8:]
    if len(payload) < n:
        raise TruncatedFileError(f"{path}: expected {n} labels, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=n).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, h, w))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def parse_idx(images_path, labels_path, class_count: int = 10) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1] by /255."""
    raw = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(labels) != len(raw):
        raise ConsistencyError(f"{images_path} holds {len(raw)} images but {labels_path} holds {len(labels)} labels")
    images = raw.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(images, labels.astype(np.int64), class_count)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def mnist_paths(directory, split: str) -> tuple[Path, Path]:
    key = "test" if split == "test" else "train"
    images, labels = _MNIST_FILES[key]
    directory = Path(directory)
    return _find(directory, images), _find(directory, labels)


def load_mnist(directory, split: str = "train") -> Dataset:
    """``train`` is the first 50,000 official training images, ``validation`` the rest."""
    if split not in ("train", "validation", "test"):
        raise ValueError(f"unknown split {split!r}")
    ds = parse_idx(*mnist_paths(directory, split))
    if split == "train":
        return ds.subset(np.arange(min(MNIST_TRAIN_SIZE, len(ds))))
    if split == "validation":
        return ds.subset(np.arange(MNIST_TRAIN_SIZE, len(ds)))
    return ds


def default_mnist_dir() -> Path:
    return Path(os.environ.get("CM_MNIST_DIR", "data/mnist"))


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 128
    shuffle_seed: int = 0
    drop_last: bool = False
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def batch_order(n: int, plan: BatchPlan, rng: Xoshiro256 | None = None) -> list[np.ndarray]:
    if plan.shuffle:
        perm = (rng or Xoshiro256(plan.shuffle_seed)).permutation(n)
    else:
        perm = np.arange(n)
    stop = n - n % plan.batch_size if plan.drop_last else n
    return [perm[i : min(i + plan.batch_size, stop)] for i in range(0, stop, plan.batch_size)]


def batches(
    dataset: Dataset, plan: BatchPlan, rng: Xoshiro256 | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) mini-batches.

    Without ``rng`` the permutation comes from ``plan.shuffle_seed``, so the
    sequence is identical on every call.  Passing a generator lets a
    training loop draw a fresh permutation per epoch from one stream.
    """
    for idx in batch_order(len(dataset), plan, rng):
        yield dataset.images[idx], dataset.labels[idx]


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


def class_means(c: int, d: int, radius: float = 1.0) -> np.ndarray:
    """Scaled one-hot simplex corners when d >= c, otherwise points on a circle in the first two axes."""
    means = np.zeros((c, d))
    if d >= c:
        means[np.arange(c), np.arange(c)] = radius
    else:
        angles = 2.0 * math.pi * np.arange(c) / c
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    return means


def synth_blobs(
    c: int,
    d: int,
    n_per_class: int,
    noise_good: float,
    noise_low: float,
    low_fraction: float,
    seed: int,
    radius: float = 1.0,
) -> Dataset:
    """Gaussian blobs where a fixed share of each class carries extra noise.

    The first ``floor(low_fraction * n_per_class)`` samples of each class are
    drawn with ``noise_low`` and tagged ``low``; the rest use ``noise_good``.
    Samples are stored as [n, 1, 1, d] images.
    """
    if c < 2:
        raise DomainError(f"need at least 2 classes, got {c}")
    if d < 2:
        raise DomainError(f"need at least 2 dimensions, got {d}")
    if not (noise_low >= noise_good >= 0):
        raise DomainError(f"noise levels must satisfy noise_low >= noise_good >= 0, got {noise_low}, {noise_good}")
    if not 0.0 <= low_fraction <= 1.0:
        raise DomainError(f"low_fraction must lie in [0, 1], got {low_fraction}")
    rng = Xoshiro256(seed)
    means = class_means(c, d, radius)
    n_low = int(math.floor(low_fraction * n_per_class))
    feats, labels, tags = [], [], []
    for k in range(c):
        for i in range(n_per_class):
            low = i < n_low
            sigma = noise_low if low else noise_good
            feats.append(means[k] + sigma * rng.normal_array(d))
            labels.append(k)
            tags.append(QUALITY_LOW if low else QUALITY_GOOD)
    x = np.array(feats).reshape(-1, 1, 1, d)
    return Dataset(x, np.array(labels), c, np.array(tags, dtype=object))


def write_synth_csv(dataset: Dataset, path) -> None:
    flat = dataset.images.reshape(len(dataset), -1)
    quality = dataset.quality if dataset.quality is not None else [QUALITY_UNKNOWN] * len(dataset)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "quality"] + [f"f{j}" for j in range(flat.shape[1])])
        for label, q, row in zip(dataset.labels, quality, flat):
            w.writerow([int(label), q] + [repr(float(v)) for v in row])


def read_synth_csv(path, class_count: int | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:2] != ["label", "quality"]:
        raise FormatError(f"{path}: unexpected header {header[:2]}")
    d = len(header) - 2
    if not body:
        raise FormatError(f"{path}: no samples")
    labels = np.array([int(r[0]) for r in body])
    feats = np.array([[float(v) for v in r[2:]] for r in body])
    if feats.shape[1] != d:
        raise DimensionError(f"{path}: rows do not match header width")
    c = class_count or int(labels.max()) + 1
    return Dataset(feats.reshape(-1, 1, 1, d), labels, c, np.array([r[1] for r in body], dtype=object))
