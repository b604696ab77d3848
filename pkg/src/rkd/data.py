"""Datasets: IDX and CIFAR binary readers, a synthetic generator, batching.

Images are kept in two forms: the raw ``uint8`` pixels (so files round-trip
exactly) and a float copy normalized per channel with statistics taken from
the training split.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


class DatasetFormatError(ValueError):
    """Base class for malformed dataset files."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class CountMismatchError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [n, C, H, W] float32, normalized
    labels: np.ndarray  # [n] int64
    classes: int
    mean: np.ndarray  # per-channel, in raw pixel units
    std: np.ndarray
    raw: Optional[np.ndarray] = None  # [n, C, H, W] uint8

    def __post_init__(self):
        if len(self.images) < 1:
            raise ValueError("a dataset needs at least one sample")
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def stats(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean, self.std

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        raw = None if self.raw is None else self.raw[idx]
        return Dataset(self.images[idx], self.labels[idx], self.classes, self.mean, self.std, raw)


def from_pixels(raw: np.ndarray, labels: np.ndarray, classes: Optional[int] = None,
                stats: Optional[tuple[np.ndarray, np.ndarray]] = None) -> Dataset:
    """Normalize ``uint8`` pixels; computes per-channel stats unless given."""
    raw = np.ascontiguousarray(raw, dtype=np.uint8)
    if raw.ndim == 3:
        raw = raw[:, None]
    pix = raw.astype(np.float64)
    if stats is None:
        mean = pix.mean(axis=(0, 2, 3))
        std = pix.std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)
    else:
        mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    images = ((pix - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if classes is None:
        classes = int(labels.max()) + 1
    return Dataset(images, labels, int(classes), mean, std, raw)


# ---------------------------------------------------------------------------
# IDX


def _read(path: Path) -> bytes:
    return Path(path).read_bytes()


def read_idx(path: Union[str, Path], expected_magic: int) -> np.ndarray:
    buf = _read(path)
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) - header < count:
        raise TruncatedFileError(f"{path}: expected {count} data bytes, found {len(buf) - header}")
    if len(buf) - header > count:
        raise DatasetFormatError(f"{path}: {len(buf) - header - count} unexpected bytes after the data")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path: Union[str, Path], array: np.ndarray, magic: int) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if array.ndim != magic & 0xFF:
        raise ValueError(f"magic 0x{magic:08x} needs a {magic & 0xFF}-d array, got {array.ndim}-d")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_idx(images_path, labels_path, classes: Optional[int] = None, stats=None) -> Dataset:
    images = read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = read_idx(labels_path, IDX_LABEL_MAGIC)
    if len(images) != len(labels):
        raise CountMismatchError(
            f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels"
        )
    return from_pixels(images, labels, classes, stats)


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    if ds.raw is None or ds.raw.shape[1] != 1:
        raise ValueError("IDX export needs single-channel raw pixels")
    write_idx(images_path, ds.raw[:, 0], IDX_IMAGE_MAGIC)
    write_idx(labels_path, ds.labels.astype(np.uint8), IDX_LABEL_MAGIC)


# ---------------------------------------------------------------------------
# CIFAR binary


def read_cifar_binary(path: Union[str, Path]) -> tuple[np.ndarray, np.ndarray]:
    """One CIFAR-10 ``.bin`` file: 1 label byte then 3072 R,G,B plane bytes per record."""
    buf = _read(path)
    if len(buf) == 0 or len(buf) % CIFAR_RECORD:
        raise TruncatedFileError(f"{path}: {len(buf)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, *CIFAR_SHAPE).copy(), rec[:, 0].astype(np.int64)


def write_cifar_binary(path: Union[str, Path], raw: np.ndarray, labels: np.ndarray) -> None:
    raw = np.ascontiguousarray(raw, dtype=np.uint8).reshape(len(raw), -1)
    if raw.shape[1] != CIFAR_RECORD - 1:
        raise ValueError("CIFAR records hold 3x32x32 images")
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], raw], axis=1)
    Path(path).write_bytes(rec.tobytes())


def load_cifar(paths, classes: int = 10, stats=None) -> Dataset:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    parts = [read_cifar_binary(p) for p in paths]
    raw = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if labels.max() >= classes:
        raise DatasetFormatError(f"label {labels.max()} out of range for {classes} classes")
    return from_pixels(raw, labels, classes, stats)


def load_dataset(path: Union[str, Path], format: str, split: str = "train", classes: Optional[int] = None,
                 stats=None) -> Dataset:
    """Load ``idx`` or ``cifar-binary`` data from a file or a dataset root.

    Root layouts: IDX uses the MNIST names (``train-images-idx3-ubyte`` /
    ``train-labels-idx1-ubyte``, ``t10k-*`` for the test split); CIFAR uses
    ``data_batch_*.bin`` for train and ``test_batch.bin`` for test.
    """
    path = Path(path)
    if format == "idx":
        prefix = "t10k" if split == "test" else split
        if path.is_dir():
            return load_idx(path / f"{prefix}-images-idx3-ubyte", path / f"{prefix}-labels-idx1-ubyte", classes, stats)
        labels_path = Path(str(path).replace("images-idx3", "labels-idx1"))
        return load_idx(path, labels_path, classes, stats)
    if format == "cifar-binary":
        if path.is_dir():
            files = sorted(path.glob("data_batch_*.bin")) if split == "train" else [path / "test_batch.bin"]
            if not files:
                raise FileNotFoundError(f"no CIFAR batches under {path}")
            return load_cifar(files, classes or 10, stats)
        return load_cifar(path, classes or 10, stats)
    raise ValueError(f"unknown dataset format {format!r}; use 'idx' or 'cifar-binary'")


# ---------------------------------------------------------------------------
# synthetic data


def _blob_field(rng: np.random.Generator, size, blobs: int) -> np.ndarray:
    c, h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field = np.zeros(size)
    for ch in range(c):
        for _ in range(blobs):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            sigma = rng.uniform(0.08, 0.25) * min(h, w)
            amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
            field[ch] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return field


def _synthetic_pixels(seed: int, classes: int, count: int, size, noise: float, jitter: int):
    if classes < 2:
        raise ValueError("synthetic data needs at least two classes")
    pattern_rng = np.random.default_rng([seed, 0])
    sample_rng = np.random.default_rng([seed, 1])
    patterns = [_blob_field(pattern_rng, size, blobs=3) for _ in range(classes)]
    raw = np.empty((classes * count,) + tuple(size), dtype=np.uint8)
    labels = np.repeat(np.arange(classes), count)
    for i, lab in enumerate(labels):
        dy, dx = sample_rng.integers(-jitter, jitter + 1, size=2)
        img = np.roll(patterns[lab], (dy, dx), axis=(1, 2)) * sample_rng.uniform(0.7, 1.3)
        img = img + noise * sample_rng.standard_normal(size)
        raw[i] = np.clip(np.rint(128 + 60 * img), 0, 255).astype(np.uint8)
    return raw, labels


def make_synthetic(seed: int, classes: int, per_class: int, size=(1, 32, 32), noise: float = 1.5,
                   jitter: int = 6) -> Dataset:
    """Class-conditional Gaussian-blob images, ``per_class`` samples of each class.

    Every class gets a seeded pattern of blobs; samples add a random shift,
    a random gain and pixel noise. Fully determined by ``seed``.
    """
    raw, labels = _synthetic_pixels(seed, classes, per_class, size, noise, jitter)
    return from_pixels(raw, labels, classes)


def make_synthetic_splits(seed: int, classes: int, per_class: int, holdout_per_class: int, size=(1, 32, 32),
                          noise: float = 1.5, jitter: int = 6) -> tuple[Dataset, Dataset]:
    """Train and held-out sets drawn from the same class patterns.

    The held-out set is normalized with the training split's statistics.
    """
    raw, labels = _synthetic_pixels(seed, classes, per_class + holdout_per_class, size, noise, jitter)
    per = per_class + holdout_per_class
    within = np.arange(len(labels)) % per
    train = from_pixels(raw[within < per_class], labels[within < per_class], classes)
    test = from_pixels(raw[within >= per_class], labels[within >= per_class], classes, train.stats)
    return train, test


# ---------------------------------------------------------------------------
# batching


def epoch_permutation(n: int, epoch_seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([epoch_seed, epoch]).permutation(n)


def batch_iterator(ds: Dataset, batch_size: int, epoch_seed: int = 0, shuffle: bool = True, epoch: int = 0,
                   hflip: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(images, labels, indices)``; the last partial batch is kept.

    The visiting order depends only on ``(epoch_seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = len(ds)
    order = epoch_permutation(n, epoch_seed, epoch) if shuffle else np.arange(n)
    flips = np.random.default_rng([epoch_seed, epoch, 1]).random(n) < 0.5 if hflip else None
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x = ds.images[idx]
        if flips is not None:
            x = np.where(flips[idx][:, None, None, None], x[..., ::-1], x)
        yield x, ds.labels[idx], idx
