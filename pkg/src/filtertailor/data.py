"""Dataset loading, normalization, and target-task sampling.

Loaders cover the IDX image/label format and the CIFAR-10 binary batch
format. Target tasks are built by seeded per-class sampling: exactly k
training examples per class plus a disjoint validation slice sized by
the validation fraction.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError
from .tensor import Tensor

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801
_CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixels


@dataclass(frozen=True)
class Dataset:
    """Immutable image set: [N,C,H,W] float32 images and integer labels."""

    images: Tensor
    labels: np.ndarray
    class_count: int
    name: str

    def __post_init__(self):
        if self.images.data.ndim != 4:
            raise DataFormatError(f"{self.name}: images must be [N,C,H,W]")
        n = self.images.data.shape[0]
        if n < 1:
            raise DataFormatError(f"{self.name}: dataset is empty")
        if self.labels.shape != (n,):
            raise DataFormatError(
                f"{self.name}: {n} images but {self.labels.shape[0]} labels"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataFormatError(
                f"{self.name}: labels outside [0, {self.class_count})"
            )

    @property
    def n(self) -> int:
        return self.images.data.shape[0]


@dataclass(frozen=True)
class TargetTaskSpec:
    """Per-class shot count, validation fraction, and sampling seed."""

    k: int
    val_fraction: float
    seed: int

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0,1), got {self.val_fraction}")


def _read_file(path) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except FileNotFoundError:
        raise DataFormatError(f"{path}: file not found") from None


def _idx_header(buf: bytes, path, expected_magic: int, dims: int) -> tuple:
    need = 4 * (1 + dims)
    if len(buf) < need:
        raise DataFormatError(f"{path}: header needs {need} bytes, file has {len(buf)}")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    return struct.unpack(f">{dims}I", buf[4:need])


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair into a [N,1,H,W] dataset in [0,1]."""
    ibuf = _read_file(images_path)
    n, h, w = _idx_header(ibuf, images_path, _IDX_IMAGE_MAGIC, 3)
    expected = 16 + n * h * w
    if len(ibuf) != expected:
        raise DataFormatError(
            f"{images_path}: expected {expected} bytes for {n} {h}x{w} images, "
            f"file has {len(ibuf)}"
        )
    lbuf = _read_file(labels_path)
    (ln,) = _idx_header(lbuf, labels_path, _IDX_LABEL_MAGIC, 1)
    if len(lbuf) != 8 + ln:
        raise DataFormatError(
            f"{labels_path}: expected {8 + ln} bytes for {ln} labels, file has {len(lbuf)}"
        )
    if ln != n:
        raise DataFormatError(
            f"image/label count mismatch: {images_path} has {n}, {labels_path} has {ln}"
        )
    pixels = np.frombuffer(ibuf, dtype=np.uint8, offset=16).reshape(n, 1, h, w)
    images = pixels.astype(np.float32) / 255.0
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(Tensor(images), labels, int(labels.max()) + 1, name=str(images_path))


def load_cifar_binary(paths, name: str = "cifar") -> Dataset:
    """Load CIFAR-10 binary batches (3073-byte records) into [N,3,32,32]."""
    if isinstance(paths, (str, bytes)) or not hasattr(paths, "__iter__"):
        paths = [paths]
    chunks, label_chunks = [], []
    for path in paths:
        buf = _read_file(path)
        if len(buf) == 0 or len(buf) % _CIFAR_RECORD != 0:
            raise DataFormatError(
                f"{path}: size {len(buf)} is not a positive multiple of "
                f"{_CIFAR_RECORD}-byte records"
            )
        records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
        label_chunks.append(records[:, 0].astype(np.int64))
        chunks.append(records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    images = np.concatenate(chunks)
    labels = np.concatenate(label_chunks)
    if labels.max() > 9:
        raise DataFormatError(f"{name}: label {labels.max()} exceeds the CIFAR-10 range")
    return Dataset(Tensor(images), labels, 10, name=name)


def normalize(ds: Dataset) -> tuple[Dataset, np.ndarray]:
    """Shift each channel to zero mean; returns the shifted set and the means."""
    means = ds.images.data.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    shifted = ds.images.data - means[None, :, None, None]
    return Dataset(Tensor(shifted), ds.labels, ds.class_count, ds.name), means


def shift_channels(ds: Dataset, means: np.ndarray) -> Dataset:
    """Apply a previously computed per-channel shift (for val/test splits)."""
    shifted = ds.images.data - np.asarray(means, dtype=np.float32)[None, :, None, None]
    return Dataset(Tensor(shifted), ds.labels, ds.class_count, ds.name)


def sample_target(ds: Dataset, spec: TargetTaskSpec) -> tuple[Dataset, Dataset]:
    """Draw a k-shot train split and a disjoint validation split per class.

    Validation size per class is ceil(k * f / (1 - f)) with a floor of 1,
    so validation is roughly the requested fraction of the sampled pool.
    """
    if spec.k * ds.class_count > ds.n:
        raise ConfigError(
            f"{ds.name}: k={spec.k} over {ds.class_count} classes needs "
            f"{spec.k * ds.class_count} examples, dataset has {ds.n}"
        )
    f = spec.val_fraction
    val_per_class = max(1, math.ceil(spec.k * f / (1.0 - f)))
    rng = np.random.default_rng(spec.seed)
    train_idx, val_idx = [], []
    # visit classes in ascending label, not first-appearance order, so rng
    # consumption follows a fixed schedule for a given seed
    for c in range(ds.class_count):
        pool = np.flatnonzero(ds.labels == c)
        need = spec.k + val_per_class
        if pool.size < need:
            raise ConfigError(
                f"{ds.name}: class {c} has {pool.size} examples but needs "
                f"{need} ({spec.k} train + {val_per_class} val)"
            )
        picked = rng.permutation(pool)[:need]
        train_idx.append(picked[:spec.k])
        val_idx.append(picked[spec.k:])
    train_idx = np.concatenate(train_idx)
    val_idx = np.concatenate(val_idx)
    return (
        _take(ds, train_idx, f"{ds.name}/train"),
        _take(ds, val_idx, f"{ds.name}/val"),
    )


def _take(ds: Dataset, idx: np.ndarray, name: str) -> Dataset:
    return Dataset(Tensor(ds.images.data[idx].copy()), ds.labels[idx].copy(),
                   ds.class_count, name)


def split_fraction(ds: Dataset, val_fraction: float, seed) -> tuple[Dataset, Dataset]:
    """Plain seeded split into (train, val); val gets round(N * fraction) >= 1."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in (0,1), got {val_fraction}")
    n_val = max(1, round(ds.n * val_fraction))
    if n_val >= ds.n:
        raise ConfigError(f"{ds.name}: val_fraction {val_fraction} leaves no training data")
    order = np.random.default_rng(seed).permutation(ds.n)
    return (_take(ds, order[n_val:], f"{ds.name}/train"),
            _take(ds, order[:n_val], f"{ds.name}/val"))


def batch_iterator(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None,
                   shuffle: bool = True):
    """Yield (Tensor[N,C,H,W], labels) batches for one pass over the data.

    With shuffle, the permutation is drawn from the supplied generator, so
    the caller controls epoch-to-epoch ordering. The final short batch is
    kept.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if shuffle:
        if rng is None:
            raise ConfigError("shuffled iteration needs an explicit generator")
        order = rng.permutation(ds.n)
    else:
        order = np.arange(ds.n)
    for start in range(0, ds.n, batch_size):
        idx = order[start:start + batch_size]
        yield Tensor(ds.images.data[idx]), ds.labels[idx]


def random_crop_pad(images: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad each image by `pad` on every side, then crop back at a random offset."""
    if pad < 1:
        return images
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offsets[i]
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out
