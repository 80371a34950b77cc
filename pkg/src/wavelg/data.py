"""Desk-scale datasets: a seeded synthetic image generator and IDX file ingestion."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from .errors import FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    train_x: np.ndarray  # (n, H, W, C) float32, normalized
    train_y: np.ndarray  # (n,) int64
    val_x: np.ndarray
    val_y: np.ndarray
    classes: int
    name: str = "dataset"

    def __post_init__(self):
        for split, x, y in (("train", self.train_x, self.train_y), ("val", self.val_x, self.val_y)):
            if len(x) == 0:
                raise InputError(f"{split} split is empty")
            if len(x) != len(y):
                raise InputError(f"{split}: {len(x)} images but {len(y)} labels")
            if x.ndim != 4:
                raise InputError(f"{split} images must be (n, H, W, C), got {x.shape}")
            if y.min() < 0 or y.max() >= self.classes:
                raise InputError(f"{split} labels outside [0, {self.classes})")

    @property
    def image_size(self) -> int:
        return int(self.train_x.shape[1])

    @property
    def channels(self) -> int:
        return int(self.train_x.shape[3])


# --------------------------------------------------------------------------
# IDX
# --------------------------------------------------------------------------

def read_idx(path, expect_magic: int) -> np.ndarray:
    """Read an unsigned-byte IDX array (big-endian header)."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expect_magic:
        raise FormatError(f"{path}: IDX magic {magic:#010x}, expected {expect_magic:#010x}")
    ndim = magic & 0xFF
    if len(data) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX dimension block")
    dims = struct.unpack(f">{ndim}I", data[4 : 4 + 4 * ndim])
    count = int(np.prod(dims, dtype=np.int64))
    body = data[4 + 4 * ndim :]
    if len(body) != count:
        raise FormatError(f"{path}: header promises {count} bytes of data, file has {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------

SYNTHETIC_DEFAULTS = {
    "classes": 4,
    "samples": 400,
    "seed": 0,
    "image_size": 16,
    "channels": 1,
    "noise": 0.6,
    "max_shift": 2,
    "val_fraction": 0.2,
}


def _prototypes(rng, classes, size, channels, cells=4):
    """Smooth random class patterns: a coarse Gaussian field upsampled bilinearly."""
    coarse = rng.standard_normal((classes, cells + 1, cells + 1, channels))
    out = zoom(coarse, (1, size / (cells + 1), size / (cells + 1), 1), order=1)
    return out / out.std(axis=(1, 2, 3), keepdims=True)


def synthetic_images(classes, samples, seed, image_size=16, channels=1, noise=0.6, max_shift=2):
    """Raw (un-normalized) images and balanced labels."""
    rng = np.random.default_rng(seed)
    protos = _prototypes(rng, classes, image_size, channels)
    labels = np.arange(samples) % classes
    rng.shuffle(labels)
    x = np.empty((samples, image_size, image_size, channels))
    shifts = rng.integers(-max_shift, max_shift + 1, size=(samples, 2))
    gains = rng.uniform(0.7, 1.3, size=samples)
    for n in range(samples):
        img = np.roll(protos[labels[n]], shift=tuple(shifts[n]), axis=(0, 1))
        x[n] = gains[n] * img
    x += noise * rng.standard_normal(x.shape)
    return x, labels.astype(np.int64)


def _split_normalize(x, y, classes, seed, val_fraction, name):
    n = len(x)
    if not 0 < val_fraction < 1:
        raise InputError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    perm = np.random.default_rng([seed, 17]).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    if n - n_val < 1:
        raise InputError(f"{n} samples cannot be split into nonempty train/val")
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    xtr = np.asarray(x[tr_idx], dtype=np.float64)
    mean = xtr.mean(axis=(0, 1, 2))
    std = xtr.std(axis=(0, 1, 2))
    std = np.where(std > 0, std, 1.0)

    def norm(a):
        return ((np.asarray(a, dtype=np.float64) - mean) / std).astype(np.float32)

    return Dataset(norm(x[tr_idx]), y[tr_idx], norm(x[val_idx]), y[val_idx], classes, name)


def load_dataset(source: dict) -> Dataset:
    """Build a dataset from a source spec.

    ``{"kind": "synthetic", classes, samples, seed, ...}`` or
    ``{"kind": "idx", "images": path, "labels": path, "classes": optional, ...}``.
    Pixels are standardized per channel with train-split statistics.
    """
    source = dict(source)
    kind = source.pop("kind", "synthetic")
    if kind == "synthetic":
        unknown = set(source) - set(SYNTHETIC_DEFAULTS)
        if unknown:
            raise InputError(f"unknown synthetic dataset keys: {sorted(unknown)}")
        opts = {**SYNTHETIC_DEFAULTS, **source}
        if opts["classes"] < 2 or opts["samples"] < 2:
            raise InputError("synthetic dataset needs >= 2 classes and >= 2 samples")
        x, y = synthetic_images(
            opts["classes"], opts["samples"], opts["seed"], opts["image_size"],
            opts["channels"], opts["noise"], opts["max_shift"],
        )
        return _split_normalize(x, y, opts["classes"], opts["seed"], opts["val_fraction"], "synthetic")
    if kind == "idx":
        allowed = {"images", "labels", "classes", "seed", "val_fraction", "limit"}
        unknown = set(source) - allowed
        if unknown:
            raise InputError(f"unknown idx dataset keys: {sorted(unknown)}")
        for key in ("images", "labels"):
            if key not in source:
                raise InputError(f"idx dataset needs an {key!r} path")
            if not Path(source[key]).is_file():
                raise InputError(f"dataset file not found: {source[key]}")
        images = read_idx(source["images"], IDX_IMAGES_MAGIC)
        labels = read_idx(source["labels"], IDX_LABELS_MAGIC).astype(np.int64)
        if len(images) != len(labels):
            raise FormatError(f"{len(images)} images but {len(labels)} labels")
        limit = source.get("limit")
        if limit:
            images, labels = images[:limit], labels[:limit]
        classes = int(source.get("classes") or labels.max() + 1)
        x = images.astype(np.float64)[..., None] / 255.0
        return _split_normalize(
            x, labels, classes, source.get("seed", 0), source.get("val_fraction", 0.2), "idx"
        )
    raise InputError(f"unknown dataset kind {kind!r}")
