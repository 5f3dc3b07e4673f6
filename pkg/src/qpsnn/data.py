"""Datasets: seeded synthetic image classes, IDX (MNIST-style) and CSV loaders."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_SPLIT_IDS = {"train": 0, "test": 1}


@dataclass
class Dataset:
    samples: np.ndarray   # [N, C, H, W], values in [0, 1]
    labels: np.ndarray    # [N] int64
    n_classes: int
    split: str = "train"
    seed: int | None = None

    def __post_init__(self):
        if len(self.samples) == 0:
            raise InvalidArgumentError("dataset is empty")
        if len(self.samples) != len(self.labels):
            raise InvalidArgumentError("sample and label counts differ")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise InvalidArgumentError("labels outside [0, n_classes)")
        if self.samples.min() < 0.0 or self.samples.max() > 1.0:
            raise InvalidArgumentError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.samples)

    @property
    def image_shape(self):
        return tuple(self.samples.shape[1:])

    def subset(self, idx):
        return Dataset(self.samples[idx], self.labels[idx], self.n_classes, self.split, self.seed)

    def batches(self, batch_size, seed=None):
        """Yield ``(x, y)`` minibatches, shuffled when ``seed`` is given."""
        order = np.arange(len(self)) if seed is None else np.random.default_rng(seed).permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.samples[idx], self.labels[idx]


def synth_blobs(n_classes=4, n_per_class=100, image_size=16, seed=0, split="train",
                channels=1, blob_width=None, jitter=0.5, noise=0.05, amplitude=1.0):
    """Class-conditional Gaussian bumps.

    Class ``k`` centers its bump at angle ``2*pi*k/n_classes`` on a circle of
    radius ``image_size/4`` around the image center.  Each sample jitters the
    center by ``N(0, jitter)`` pixels and adds ``N(0, noise)`` pixel noise,
    clipped to [0, 1].  The ``split`` name is mixed into the seed, so train
    and test draws are independent.
    """
    if min(n_classes, n_per_class, image_size, channels) < 1:
        raise InvalidArgumentError("dataset sizes must be >= 1")
    if split not in _SPLIT_IDS:
        raise InvalidArgumentError(f"unknown split {split!r}")
    rng = np.random.default_rng([seed, _SPLIT_IDS[split]])
    width = blob_width if blob_width is not None else image_size / 8.0
    mid = (image_size - 1) / 2.0
    radius = image_size / 4.0
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centers = np.stack([mid + radius * np.sin(angles), mid + radius * np.cos(angles)], axis=1)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    n = labels.size
    c = centers[labels] + rng.normal(0.0, jitter, size=(n, 2))
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    d2 = (yy[None] - c[:, 0, None, None]) ** 2 + (xx[None] - c[:, 1, None, None]) ** 2
    img = amplitude * np.exp(-d2 / (2.0 * width ** 2))
    img = np.repeat(img[:, None], channels, axis=1)
    img = np.clip(img + rng.normal(0.0, noise, size=img.shape), 0.0, 1.0)
    order = rng.permutation(n)
    return Dataset(img[order], labels[order], n_classes, split, seed)


def _parse_idx(buf: bytes, expected_magic, what):
    if len(buf) == 0:
        raise ParseError(f"empty {what} file", 0)
    if len(buf) < 4:
        raise ParseError(f"truncated {what} header", len(buf))
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise ParseError(f"bad {what} magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise ParseError(f"truncated {what} dimensions", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) < header + count:
        raise ParseError(f"truncated {what} payload: expected {count} bytes", len(buf))
    if len(buf) > header + count:
        raise ParseError(f"trailing bytes after {what} payload", header + count)
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def sibling_labels_path(images_path):
    name = Path(images_path).name
    if "images" not in name:
        raise InvalidArgumentError(f"cannot derive a label file name from {name!r}")
    return Path(images_path).with_name(name.replace("images", "labels").replace("idx3", "idx1"))


def load_idx(path, labels_path=None, n_classes=None, split="train"):
    """Read an IDX image file (``[N, H, W]`` uint8) and its label file."""
    images = _parse_idx(Path(path).read_bytes(), IDX_IMAGES_MAGIC, "image")
    labels_path = labels_path or sibling_labels_path(path)
    labels = _parse_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC, "label")
    if labels.shape[0] != images.shape[0]:
        raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    samples = images.astype(np.float64)[:, None] / 255.0
    labels = labels.astype(np.int64)
    return Dataset(samples, labels, n_classes or int(labels.max()) + 1, split)


def encode_idx_images(samples):
    """Inverse of the loader's scaling: ``[N, 1, H, W]`` in [0, 1] -> IDX bytes."""
    arr = np.asarray(samples)
    if arr.ndim == 4:
        if arr.shape[1] != 1:
            raise InvalidArgumentError("IDX images are single channel")
        arr = arr[:, 0]
    codes = np.rint(arr * 255.0).astype(np.uint8)
    return struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *codes.shape) + codes.tobytes()


def encode_idx_labels(labels):
    codes = np.asarray(labels).astype(np.uint8)
    return struct.pack(">I", IDX_LABELS_MAGIC) + struct.pack(">I", codes.size) + codes.tobytes()


def load_csv(path, image_shape=None, n_classes=None, split="train"):
    """CSV with header ``label,p0,p1,...``; pixels are 0-255 integers."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty CSV file", 0) from None
        if not header or header[0].strip() != "label":
            raise ParseError("CSV header must start with 'label'", 0)
        rows = [r for r in reader if r]
    if not rows:
        raise ParseError("CSV file has no data rows")
    try:
        table = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"non-numeric CSV value: {exc}") from None
    if table.shape[1] != len(header):
        raise ParseError("CSV rows do not match the header width")
    labels = table[:, 0].astype(np.int64)
    pixels = table[:, 1:] / 255.0
    n_pix = pixels.shape[1]
    if image_shape is None:
        side = int(round(np.sqrt(n_pix)))
        if side * side != n_pix:
            raise ParseError(f"{n_pix} pixels is not a square image; pass image_shape")
        image_shape = (1, side, side)
    samples = pixels.reshape((-1,) + tuple(image_shape))
    return Dataset(samples, labels, n_classes or int(labels.max()) + 1, split)
