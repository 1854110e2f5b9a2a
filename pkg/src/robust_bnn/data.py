"""IDX image/label files, dataset subsetting and batching, synthetic toys."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, UsageError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_GZIP_MAGIC = b"\x1f\x8b"


@dataclass(frozen=True)
class Dataset:
    """Inputs as an (n_D, n) float array, integer labels of length n_D."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if inputs.ndim == 1:
            inputs = inputs.reshape(-1, 1)
        if inputs.ndim != 2:
            inputs = inputs.reshape(inputs.shape[0], -1)
        if len(inputs) != len(labels):
            raise UsageError(f"{len(inputs)} inputs but {len(labels)} labels")
        if not np.isfinite(inputs).all():
            raise UsageError("dataset inputs must be finite")
        if np.any(labels < 0):
            raise UsageError("labels must be non-negative")
        inputs.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def size(self):
        return len(self.labels)

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    def take(self, index):
        return Dataset(self.inputs[index], self.labels[index])


def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == _GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, magic, ndim):
    if len(raw) < 4:
        raise FormatError("file shorter than the 4-byte magic", offset=len(raw))
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise FormatError(f"bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError("truncated header", offset=len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = 1
    for d in dims:
        count *= d
    if count > 2**40:
        raise FormatError(f"dimensions {dims} overflow", offset=4)
    available = len(raw) - header_end
    if available < count:
        raise FormatError(f"truncated payload: need {count} bytes, found {available}",
                          offset=len(raw))
    payload = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end)
    return payload.reshape(dims)


def load_idx_images(path):
    """Read an IDX image file (plain or gzipped) as floats in [0, 1].

    Returns an array of shape (count, rows, cols).
    """
    return _parse_idx(_read_bytes(path), IMAGE_MAGIC, 3).astype(np.float64) / 255.0


def load_idx_labels(path):
    return _parse_idx(_read_bytes(path), LABEL_MAGIC, 1).astype(np.int64)


def _write(path, raw):
    if str(path).endswith(".gz"):
        # mtime=0 keeps the archive byte-stable across runs
        raw = gzip.compress(raw, mtime=0)
    with open(path, "wb") as fh:
        fh.write(raw)


def write_idx_images(path, images):
    """Write uint8 images of shape (count, rows, cols); gzip when path ends in .gz."""
    arr = np.asarray(images)
    if arr.ndim != 3:
        raise UsageError("images must have shape (count, rows, cols)")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise UsageError("pixel values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    _write(path, struct.pack(">IIII", IMAGE_MAGIC, *arr.shape) + arr.tobytes())


def write_idx_labels(path, labels):
    arr = np.asarray(labels).astype(np.uint8).reshape(-1)
    _write(path, struct.pack(">II", LABEL_MAGIC, len(arr)) + arr.tobytes())


def load_idx_dataset(images_path, labels_path):
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images.reshape(len(images), -1), labels)


def make_toy_dataset(kind, n, seed):
    """Two-class 2-D toy problems.

    ``two_gaussians``: unit-variance-ish blobs centred at (-1, -1) and (1, 1).
    ``xor``: four blobs at (+-1, +-1), label 1 when the signs differ.
    Labels alternate so the classes are balanced within one.
    """
    if n < 4:
        raise UsageError("toy datasets need n >= 4")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    noise = rng.normal(scale=0.35, size=(n, 2))
    if kind == "two_gaussians":
        centres = np.where(labels[:, None] == 1, 1.0, -1.0) * np.ones((n, 2))
    elif kind == "xor":
        first = rng.choice([-1.0, 1.0], size=n)
        second = np.where(labels == 1, -first, first)
        centres = np.stack([first, second], axis=1)
    else:
        raise UsageError(f"unknown toy dataset kind {kind!r}")
    return Dataset(centres + noise, labels)


def subset(dataset, n, seed):
    """Uniform draw of ``n`` points without replacement."""
    if n > len(dataset) or n < 1:
        raise UsageError(f"cannot draw {n} points from a dataset of size {len(dataset)}")
    idx = np.random.default_rng(seed).permutation(len(dataset))[:n]
    return dataset.take(idx)


def batches(dataset, m, seed, epoch=0):
    """Yield shuffled mini-batches of size at most ``m``; the order depends on (seed, epoch)."""
    if m < 1:
        raise UsageError("batch size must be positive")
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    for start in range(0, len(order), m):
        yield dataset.take(order[start:start + m])
