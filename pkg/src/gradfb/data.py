"""Dataset ingestion (MNIST IDX, CIFAR-100 binary, synthetic), batch sampling and PGM/PPM export."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .client import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 2 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    name: str
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def _read_bytes(path) -> bytes:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{what}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(raw) - header
    if payload != expected:
        raise DataFormatError(f"{what}: header promises {expected} bytes, payload has {payload}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if len(pixels) != len(labels):
        raise DataFormatError(f"{len(pixels)} images but {len(labels)} labels")
    images = pixels[:, None, :, :].astype(np.float64) / 255.0
    return Dataset("mnist", images, labels.astype(np.int64), 10)


def load_cifar100(bin_path) -> Dataset:
    """Read a CIFAR-100 binary file; the fine label is the class."""
    raw = _read_bytes(bin_path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"file size {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    images = records[:, 2:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset("cifar100", images, records[:, 1].astype(np.int64), 100)


def _smooth_field(rng, shape, sigma):
    c, h, w = shape
    field = gaussian_filter(rng.standard_normal((c, h, w)), sigma=(0, sigma, sigma), mode="wrap")
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo)


def make_synthetic_dataset(per_class: int = 40, num_classes: int = 10, shape=(1, 28, 28),
                           seed: int = 0, sigma: float = 3.0, variation: float = 0.3) -> Dataset:
    """Seeded smooth images: a shared prototype per class plus a per-image smooth perturbation.

    ``variation`` is the weight of the per-image field; images of one class
    are therefore strongly correlated, like shots of one person or place.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(shape)
    prototypes = [_smooth_field(rng, shape, sigma) for _ in range(num_classes)]
    images, labels = [], []
    for c in range(num_classes):
        for _ in range(per_class):
            img = (1.0 - variation) * prototypes[c] + variation * _smooth_field(rng, shape, sigma)
            images.append(np.clip(img, 0.0, 1.0))
            labels.append(c)
    order = rng.permutation(len(labels))
    return Dataset("synthetic", np.stack(images)[order], np.asarray(labels, dtype=np.int64)[order], num_classes)


def make_correlated_batch(dataset: Dataset, k: int, class_filter: int | Sequence[int] | None,
                          seed) -> Batch:
    """Draw ``k`` distinct samples, restricted to ``class_filter`` when given."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if k < 1:
        raise ValueError("k must be at least 1")
    if class_filter is None:
        pool = np.arange(len(dataset))
        desc = "any"
    else:
        classes = [class_filter] if np.isscalar(class_filter) else list(class_filter)
        pool = np.flatnonzero(np.isin(dataset.labels, classes))
        desc = ",".join(str(int(c)) for c in classes)
    if len(pool) < k:
        raise ValueError(f"class filter {desc} matches {len(pool)} samples, need {k}")
    idx = np.random.default_rng(seed).choice(pool, size=k, replace=False)
    return Batch(
        images=tuple(dataset.images[i] for i in idx),
        labels=tuple(int(dataset.labels[i]) for i in idx),
        provenance=f"{dataset.name}[{','.join(str(int(i)) for i in idx)}] classes={desc}",
    )


# ---------------------------------------------------------------- netpbm


def quantize(image) -> np.ndarray:
    """[0, 1] floats to bytes, rounding half up."""
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(image, path, format: str | None = None) -> None:
    """Write a (1|3, H, W) image in [0, 1] as binary PGM (P5) or PPM (P6)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"expected a 1- or 3-channel (C, H, W) image, got shape {image.shape}")
    channels = image.shape[0]
    fmt = (format or ("pgm" if channels == 1 else "ppm")).lower()
    if (fmt, channels) not in (("pgm", 1), ("ppm", 3)):
        raise ValueError(f"cannot write a {channels}-channel image as {fmt.upper()}")
    _, h, w = image.shape
    magic = b"P5" if fmt == "pgm" else b"P6"
    payload = quantize(image).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h) + payload)


def read_image(path) -> np.ndarray:
    """Parse a binary PGM/PPM file into a (C, H, W) array in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DataFormatError(f"unsupported netpbm variant {magic!r} maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * c, offset=pos)
    return data.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_panel(rows: Sequence[Sequence[np.ndarray]], path, gap: int = 1) -> None:
    """Tile equally shaped images into a grid (one list per row) and write it."""
    first = np.asarray(rows[0][0])
    c, h, w = first.shape
    n_cols = max(len(r) for r in rows)
    grid = np.ones((c, len(rows) * (h + gap) - gap, n_cols * (w + gap) - gap))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            grid[:, i * (h + gap):i * (h + gap) + h, j * (w + gap):j * (w + gap) + w] = img
    write_image(grid, path)
