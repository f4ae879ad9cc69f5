"""Datasets: rendered geometric toy images and IDX (MNIST-style) files."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64
    labels: np.ndarray  # [N] int64
    splits: np.ndarray  # [N] str: train / cal / eval
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits)
        if self.images.ndim != 4 or len(self.images) != len(self.labels) or len(self.labels) != len(self.splits):
            raise ContractError("images [N,C,H,W], labels [N] and splits [N] must agree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.splits == name
        return self.images[mask], self.labels[mask]


def _assign_splits(labels: np.ndarray, rng: np.random.Generator,
                   train_fraction: float, cal_fraction: float) -> np.ndarray:
    """Per-class shuffle into train / held-out, then held-out into cal / eval."""
    splits = np.empty(len(labels), dtype="<U5")
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(train_fraction * idx.size))
        held = idx[n_train:]
        n_cal = int(round(cal_fraction * held.size))
        splits[idx[:n_train]] = "train"
        splits[held[:n_cal]] = "cal"
        splits[held[n_cal:]] = "eval"
    return splits


def _standardize(images: np.ndarray, splits: np.ndarray) -> np.ndarray:
    ref = images[splits == "train"] if np.any(splits == "train") else images
    mu, sd = ref.mean(), ref.std()
    return (images - mu) / (sd if sd > 0 else 1.0)


# -- synthetic ------------------------------------------------------------------

def _shape_mask(kind: str, dx: np.ndarray, dy: np.ndarray, r: float, w: float) -> np.ndarray:
    box = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    d = np.hypot(dx, dy)
    if kind == "disc":
        return d <= r
    if kind == "ring":
        return np.abs(d - r) <= w
    if kind == "plus":
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if kind == "x":
        return box & ((np.abs(dx - dy) <= w * 1.4) | (np.abs(dx + dy) <= w * 1.4))
    if kind == "hbars":
        return box & (np.floor((dy + r) / (r / 2.5)) % 2 == 0)
    if kind == "vbars":
        return box & (np.floor((dx + r) / (r / 2.5)) % 2 == 0)
    if kind == "square":
        return box & (np.maximum(np.abs(dx), np.abs(dy)) >= r - w)
    if kind == "triangle":
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "checker":
        return box & ((np.floor((dx + r) / (r / 2)) + np.floor((dy + r) / (r / 2))) % 2 == 0)
    if kind == "dots":
        return (np.hypot(dx - r / 1.5, dy) <= r / 3) | (np.hypot(dx + r / 1.5, dy) <= r / 3)
    raise ValueError(kind)


PRIMITIVES = ("disc", "ring", "plus", "x", "hbars", "vbars", "square", "triangle", "checker", "dots")


def render_primitive(kind: str, size: int, cx: float, cy: float, scale: float = 1.0) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    r = 0.28 * size * scale
    w = max(1.0, 0.06 * size)
    return _shape_mask(kind, xx - cx, yy - cy, r, w).astype(np.float64)


def generate_synthetic(num_classes: int, n_per_class: int, image_size: int = 32, seed: int = 0,
                       noise: float = 0.1, jitter: float | None = None, channels: int = 1,
                       train_fraction: float = 0.5, cal_fraction: float = 0.0) -> Dataset:
    """One geometric primitive per class, randomly shifted and scaled, plus Gaussian noise."""
    if num_classes < 1 or n_per_class < 1 or image_size < 1 or channels < 1:
        raise ConfigError("synthetic", "sizes must be positive")
    if num_classes > len(PRIMITIVES):
        raise ConfigError("num_classes", f"only {len(PRIMITIVES)} primitives available, asked for {num_classes}")
    rng = np.random.Generator(np.random.PCG64(seed))
    jitter = image_size / 8 if jitter is None else jitter
    n = num_classes * n_per_class
    images = np.zeros((n, channels, image_size, image_size))
    labels = np.repeat(np.arange(num_classes), n_per_class)
    for i, c in enumerate(labels):
        cx, cy = image_size / 2 + rng.uniform(-jitter, jitter, size=2)
        scale = rng.uniform(0.85, 1.15)
        img = render_primitive(PRIMITIVES[c], image_size, cx, cy, scale)
        images[i] = img[None] + noise * rng.normal(size=(channels, image_size, image_size))
    splits = _assign_splits(labels, rng, train_fraction, cal_fraction)
    return Dataset(_standardize(images, splits), labels, splits, num_classes)


# -- IDX ------------------------------------------------------------------------

def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX payload into an array of its declared shape."""
    if len(raw) < 4:
        raise FormatError("file too short for IDX magic number", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"file too short for {ndim} dimension sizes", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header + count:
        raise FormatError(f"truncated payload: need {count} bytes after header, have {len(raw) - header}",
                          len(raw))
    if len(raw) > header + count:
        raise FormatError("trailing bytes after payload", header + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, seed: int = 0, train_fraction: float = 0.5,
             cal_fraction: float = 0.0, num_classes: int | None = None) -> Dataset:
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    x = images.astype(np.float64)[:, None] / 255.0
    num_classes = num_classes or int(labels.max()) + 1
    rng = np.random.Generator(np.random.PCG64(seed))
    splits = _assign_splits(labels, rng, train_fraction, cal_fraction)
    return Dataset(_standardize(x, splits), labels, splits, num_classes)


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()


def write_idx(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_idx(array))
