"""IDX image/label ingestion, [-1, 1] normalization and shuffled batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def normalize(raw):
    """uint8 pixels -> float32 in [-1, 1] via ``2 v / 255 - 1``."""
    return (np.asarray(raw, dtype=np.float32) * np.float32(2.0 / 255.0)) - np.float32(1.0)


def denormalize(values):
    """Inverse of :func:`normalize`, rounded back to uint8."""
    v = np.rint(255.0 * (np.asarray(values, dtype=np.float64) + 1.0) / 2.0)
    return np.clip(v, 0, 255).astype(np.uint8)


def one_hot(targets, num_classes):
    out = np.zeros((len(targets), num_classes), dtype=np.float32)
    out[np.arange(len(targets)), targets] = 1.0
    return out


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N x C x H x W, float32 in [-1, 1]
    labels: np.ndarray  # N x K one-hot
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self):
        return self.labels.shape[1]

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def targets(self):
        return self.labels.argmax(axis=1)

    def subset(self, indices):
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], self.name, dict(self.meta))


def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _header(raw, path, expected_magic, ndim):
    size = 4 + 4 * ndim
    if len(raw) < 4:
        raise FormatError("file too short for IDX magic number", path, offset=len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(
            f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", path, offset=0
        )
    if len(raw) < size:
        raise FormatError("truncated IDX header", path, offset=len(raw))
    return struct.unpack_from(f">{ndim}I", raw, 4), size


def read_idx_images(path):
    raw = _read_bytes(path)
    (n, rows, cols), start = _header(raw, path, IMAGES_MAGIC, 3)
    expected = n * rows * cols
    if len(raw) - start < expected:
        raise FormatError(
            f"truncated pixel data: expected {expected} bytes, found {len(raw) - start}",
            path,
            offset=len(raw),
        )
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=start).reshape(n, rows, cols)


def read_idx_labels(path, num_classes=10):
    raw = _read_bytes(path)
    (n,), start = _header(raw, path, LABELS_MAGIC, 1)
    if len(raw) - start < n:
        raise FormatError(
            f"truncated label data: expected {n} bytes, found {len(raw) - start}",
            path,
            offset=len(raw),
        )
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=start)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise FormatError(
            f"label {labels[i]} out of range for {num_classes} classes", path, offset=start + i
        )
    return labels


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def load_idx(images_path, labels_path, name="mnist", num_classes=10, limit=None):
    """Load an IDX image/label pair as a normalized :class:`Dataset`.

    Images become ``N x 1 x H x W`` float32 in [-1, 1]; labels are one-hot
    over ``num_classes``. Gzip-compressed files are accepted as well.
    """
    raw_images = read_idx_images(images_path)
    targets = read_idx_labels(labels_path, num_classes)
    if len(raw_images) != len(targets):
        raise FormatError(
            f"{len(raw_images)} images but {len(targets)} labels", labels_path, offset=4
        )
    if limit is not None:
        raw_images, targets = raw_images[:limit], targets[:limit]
    n, h, w = raw_images.shape
    images = normalize(raw_images).reshape(n, 1, h, w)
    meta = {"name": name, "K": num_classes, "H": h, "W": w, "C": 1}
    return Dataset(images, one_hot(targets, num_classes), name, meta)


def split(dataset, fraction, seed):
    """Disjoint random split; the first part holds ``floor(fraction * N)`` items."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(np.floor(fraction * len(dataset)))
    first, second = np.sort(order[:cut]), np.sort(order[cut:])
    return dataset.subset(first), dataset.subset(second)


class BatchIterator:
    """Shuffled mini-batches; each full pass advances the epoch counter.

    The order for a given epoch depends only on ``(seed, epoch)``.
    """

    def __init__(self, dataset, batch_size, seed=0, epoch=0):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = epoch

    def order(self, epoch=None):
        epoch = self.epoch if epoch is None else epoch
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))

    def __len__(self):
        return -(-len(self.dataset) // self.batch_size)

    def __iter__(self):
        order = self.order()
        self.epoch += 1
        for start in range(0, len(order), self.batch_size):
            idx = order[start : start + self.batch_size]
            yield idx, self.dataset.images[idx], self.dataset.labels[idx]
