"""Dense (batch, channel, height, width) arrays and the few primitives built on them.

Tensors are plain C-contiguous numpy arrays of dtype float32 or float64. The
helpers here validate that contract and provide the deterministic reductions
the rest of the package relies on.
"""
from __future__ import annotations

import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DataError, ShapeError, SizeError

DTYPES = {"single": np.float32, "double": np.float64}


class Shape4(NamedTuple):
    batch: int
    channels: int
    height: int
    width: int

    @property
    def size(self) -> int:
        return self.batch * self.channels * self.height * self.width

    def validate(self, itemsize: int = 8) -> "Shape4":
        if len(self) != 4 or any(int(e) < 1 for e in self):
            raise SizeError(f"every extent must be >= 1, got {tuple(self)}")
        if self.size * itemsize >= sys.maxsize:
            raise SizeError(f"element count {self.size} is not addressable")
        return self


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"precision must be 'single' or 'double', got {precision!r}")
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def tensor_new(shape: Sequence[int], fill: float = 0.0, precision="double") -> np.ndarray:
    dt = resolve_dtype(precision)
    s = Shape4(*(int(e) for e in shape)).validate(dt.itemsize)
    return np.full(s, fill, dtype=dt)


def check_tensor4(t: np.ndarray, name: str = "tensor", finite: bool = False) -> np.ndarray:
    """Return ``t`` as a contiguous float tensor, raising on bad rank, dtype or values."""
    t = np.asarray(t)
    if t.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (batch, channel, height, width), got shape {t.shape}")
    if t.dtype not in (np.float32, np.float64):
        t = t.astype(np.float64)
    Shape4(*t.shape).validate(t.dtype.itemsize)
    if finite and not np.all(np.isfinite(t)):
        raise DataError(f"{name} contains non-finite values")
    return np.ascontiguousarray(t)


def spatial_channel_mean(t: np.ndarray, sample: int) -> np.ndarray:
    """Mean feature vector of one sample over its spatial grid."""
    t = check_tensor4(t)
    if not 0 <= sample < t.shape[0]:
        raise IndexError(f"sample {sample} out of range for batch of {t.shape[0]}")
    return channel_means(t[sample : sample + 1])[0]


def channel_means(t: np.ndarray) -> np.ndarray:
    """Per-sample spatial means, shape (batch, channels).

    Each (sample, channel) plane is reduced as one contiguous run, so the result
    for a sample does not depend on which other samples share the call.
    """
    b, c, h, w = t.shape
    return t.reshape(b, c, h * w).sum(axis=2) / (h * w)


def tensor_close(a: np.ndarray, b: np.ndarray, tol_abs: float, tol_rel: float) -> bool:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    return bool(np.all(np.abs(a64 - b64) <= tol_abs + tol_rel * np.abs(b64)))


def flat_index(shape: Sequence[int], b: int, c: int, r: int, col: int) -> int:
    _, C, H, W = shape
    return ((b * C + c) * H + r) * W + col


def unravel(shape: Sequence[int], index: int) -> tuple[int, int, int, int]:
    _, C, H, W = shape
    index, col = divmod(index, W)
    index, r = divmod(index, H)
    b, c = divmod(index, C)
    return b, c, r, col


def default_workers() -> int:
    return os.cpu_count() or 1


def split_batch(n: int, workers: int) -> list[slice]:
    workers = max(1, min(int(workers), n))
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def map_batch(fn: Callable[[slice], None], n: int, workers: int = 1) -> None:
    """Run ``fn`` over disjoint batch slices, in a thread pool when workers > 1.

    ``fn`` must write only to the rows of its slice, which keeps results
    independent of the worker count.
    """
    chunks = split_batch(n, workers)
    if len(chunks) <= 1:
        for s in chunks:
            fn(s)
        return
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        for fut in [pool.submit(fn, s) for s in chunks]:
            fut.result()
