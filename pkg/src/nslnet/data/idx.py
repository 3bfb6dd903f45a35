"""IDX container I/O (the MNIST file format).

Images are stored with magic 0x00000803 followed by big-endian u32 count, rows
and columns, then u8 pixels; labels use magic 0x00000801, a count and u8
labels. Real-valued tensors use type code 0x0D (big-endian float32). Files ending in ``.gz`` are read and written through gzip.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DataError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MASK_MAGIC = 0x00000802
REAL_TYPE = 0x0D


@dataclass
class LabeledImages:
    """``images`` is (N, 1, H, W) float32 in [0, 1]; ``labels`` is (N,) int64 in [0, 10)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise DataError(f"images must be (N, 1, H, W), got {self.images.shape}")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int | None) -> "LabeledImages":
        if n is None or n >= len(self):
            return self
        return LabeledImages(self.images[:n], self.labels[:n])


def _open(path, mode):
    path = str(path)
    return gzip.open(path, mode) if path.endswith(".gz") else open(path, mode)


def read_idx_array(path, magic: int) -> np.ndarray:
    with _open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise FormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = got & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise FormatError(f"{path}: payload has {len(data) - header} bytes, expected {count}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx_array(path, arr: np.ndarray, magic: int) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    with _open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def write_idx_real(path, arr: np.ndarray) -> None:
    """Big-endian float32 IDX (type code 0x0D)."""
    arr = np.ascontiguousarray(arr, dtype=">f4")
    with _open(path, "wb") as f:
        f.write(struct.pack(">I", REAL_TYPE << 8 | arr.ndim))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_idx_real(path) -> np.ndarray:
    with _open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    ndim = magic & 0xFF
    if magic >> 8 != REAL_TYPE or ndim == 0:
        raise FormatError(f"{path}: magic 0x{magic:08x} is not a float32 IDX file")
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < 4 * count:
        raise FormatError(f"{path}: truncated float32 payload")
    return np.frombuffer(data, dtype=">f4", count=count, offset=header).astype(np.float32).reshape(dims)


def to_pixels(images: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] reals to u8 with floor(p * 256), clamped to 255."""
    q = np.floor(np.asarray(images, dtype=np.float64) * 256)
    return np.clip(q, 0, 255).astype(np.uint8)


def read_idx(images_path, labels_path) -> LabeledImages:
    raw = read_idx_array(images_path, IMAGE_MAGIC)
    labels = read_idx_array(labels_path, LABEL_MAGIC).astype(np.int64)
    if raw.ndim != 3:
        raise FormatError(f"{images_path}: expected 3 dimensions, got {raw.ndim}")
    if len(raw) != len(labels):
        raise DataError(f"{len(raw)} images but {len(labels)} labels")
    images = (raw.astype(np.float32) / 256)[:, None]
    return LabeledImages(images, labels)


def write_idx(data: LabeledImages, images_path, labels_path) -> None:
    write_idx_array(images_path, to_pixels(data.images[:, 0]), IMAGE_MAGIC)
    write_idx_array(labels_path, data.labels, LABEL_MAGIC)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def mnist_paths(directory, split: str = "train") -> tuple[Path, Path]:
    """(images, labels) paths of the standard MNIST pair for ``split`` ("train" or "test")."""
    if split not in MNIST_FILES:
        raise DataError(f"split must be one of {sorted(MNIST_FILES)}, got {split!r}")
    directory = Path(directory)
    img, lab = MNIST_FILES[split]
    return _find(directory, img), _find(directory, lab)


def load_mnist(directory, split: str = "train") -> LabeledImages:
    return read_idx(*mnist_paths(directory, split))
