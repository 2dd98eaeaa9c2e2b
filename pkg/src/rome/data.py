"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, synthetic clusters."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float64
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetFormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx])

    def split(self, n_first):
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))


def _read_idx(path, magic, ndim):
    buf = Path(path).read_bytes()
    if len(buf) < 4 + 4 * ndim:
        raise DatasetFormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise DatasetFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    body = buf[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(body) != need:
        raise DatasetFormatError(f"{path}: expected {need} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise DatasetFormatError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    return Dataset(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(path, array, magic):
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_cifar10_batch(path) -> Dataset:
    """One CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size == 0 or raw.size % 3073:
        raise DatasetFormatError(f"{path}: size {raw.size} is not a multiple of 3073")
    rec = raw.reshape(-1, 3073)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetFormatError(f"{path}: label out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels)


def synth_dataset(classes: int, dim: int, margin: float, count: int, rng, shape=None) -> Dataset:
    """Unit-variance Gaussian clusters whose means are ``margin`` apart pairwise.

    Means are ``margin / sqrt(2)`` times orthonormal directions, so any two
    classes are separated by exactly ``margin`` standard deviations.  When
    ``dim`` is a perfect square the samples are shaped as 1-channel images and
    the directions are low-frequency 2-D DCT basis images with random signs.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    if margin <= 0:
        raise ValueError("margin must be positive")
    if classes > dim:
        raise ValueError("need dim >= classes for orthogonal class means")
    side = int(round(np.sqrt(dim)))
    if side * side == dim and shape in (None, (1, side, side)):
        basis = _dct_basis(side)[:classes] * rng.choice([-1.0, 1.0], size=(classes, 1))
    else:
        q, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
        basis = q.T
    means = basis * (margin / np.sqrt(2.0))
    labels = rng.permutation(np.arange(count) % classes)
    x = means[labels] + rng.standard_normal((count, dim))
    if shape is None:
        shape = (1, side, side) if side * side == dim else (dim,)
    return Dataset(x.reshape((count, *shape)), labels.astype(np.int64))


def _dct_basis(side):
    """Orthonormal 2-D DCT-II basis images, flattened, ordered by frequency."""
    n = np.arange(side)
    c = np.cos(np.pi * (2 * n[None, :] + 1) * n[:, None] / (2 * side))
    c[0] /= np.sqrt(2.0)
    c *= np.sqrt(2.0 / side)
    pairs = sorted(((u, v) for u in range(side) for v in range(side)),
                   key=lambda uv: (uv[0] + uv[1], uv[0]))
    # skip the DC image so class means are zero-mean patterns
    return np.array([np.outer(c[u], c[v]).ravel() for u, v in pairs[1:] + pairs[:1]])
