"""Neighborhood similarity layer.

For a feature map ``phi`` of shape (B, n, H, W) and a set of m non-zero pixel
offsets, the layer emits ``psi`` of shape (B, m, H, W) whose channel k at pixel
x is the cosine similarity between the per-sample centered feature vectors at
x + offsets[k] and at x.

Boundary and degenerate pixels: neighbors outside the grid carry a centered
feature of zero (the input is padded with its own mean), and any pixel whose
centered norm is below ``epsilon`` is treated as a zero vector. Both yield a
similarity of 0 and receive no gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, DegeneratePixelError, ParameterError, ShapeError
from .tensor import channel_means, check_tensor4, map_batch

EPSILON = {np.dtype(np.float32): 1e-6, np.dtype(np.float64): 1e-8}

# Above this many pixels per sample the HW x HW Gram matrix is too costly; sweep offsets instead.
GRAM_MAX_PIXELS = 1024


@dataclass(frozen=True)
class NeighborhoodStructure:
    """Ordered tuple of distinct, non-zero (dy, dx) offsets."""

    offsets: tuple

    def __post_init__(self):
        offs = tuple((int(dy), int(dx)) for dy, dx in self.offsets)
        if not offs:
            raise ParameterError("a neighborhood needs at least one offset")
        if (0, 0) in offs:
            raise ParameterError("offset (0, 0) is not allowed")
        if len(set(offs)) != len(offs):
            raise ParameterError("offsets must be unique")
        object.__setattr__(self, "offsets", offs)

    @property
    def m(self) -> int:
        return len(self.offsets)

    @property
    def radius(self) -> int:
        return max(max(abs(dy), abs(dx)) for dy, dx in self.offsets)

    def index(self, offset) -> int:
        return self.offsets.index((int(offset[0]), int(offset[1])))

    def __len__(self):
        return len(self.offsets)


def square_neighborhood(side: int) -> NeighborhoodStructure:
    """All offsets of a side x side patch except its center, row-major from the top-left."""
    if int(side) != side or side < 3 or side % 2 == 0:
        raise ParameterError(f"square neighborhood side must be odd and >= 3, got {side}")
    r = side // 2
    return NeighborhoodStructure(
        tuple((dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0))
    )


@dataclass(frozen=True)
class NslConfig:
    neighborhood: NeighborhoodStructure
    epsilon: Optional[float] = None  # None: 1e-6 in single precision, 1e-8 in double
    boundary: str = "mean-pad"

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")
        if self.boundary != "mean-pad":
            raise ParameterError(f"unsupported boundary policy {self.boundary!r}")

    @classmethod
    def square(cls, side: int, epsilon: Optional[float] = None) -> "NslConfig":
        return cls(square_neighborhood(side), epsilon)

    def eps_for(self, dtype) -> float:
        if self.epsilon is not None:
            return float(self.epsilon)
        return EPSILON.get(np.dtype(dtype), 1e-8)


@dataclass
class NslCache:
    """What the backward pass needs from a forward call.

    ``unit`` holds the normalized centered features in channel-last layout
    (B, H, W, n), zero wherever the norm is below epsilon.
    """

    centered: np.ndarray
    norms: np.ndarray
    mean: np.ndarray
    unit: np.ndarray
    valid: np.ndarray
    method: str = "sweep"

    @property
    def shape(self):
        return self.centered.shape


@lru_cache(maxsize=64)
def _neighbor_index(h: int, w: int, offsets: tuple) -> np.ndarray:
    """(m, H*W) flat index of x + v, or H*W where it leaves the grid."""
    rows, cols = np.divmod(np.arange(h * w), w)
    out = np.empty((len(offsets), h * w), dtype=np.intp)
    for k, (dy, dx) in enumerate(offsets):
        r, c = rows + dy, cols + dx
        inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        out[k] = np.where(inside, r * w + c, h * w)
    out.setflags(write=False)
    return out


def _pick_method(method: str, h: int, w: int) -> str:
    if method == "auto":
        return "gram" if h * w <= GRAM_MAX_PIXELS else "sweep"
    if method not in ("gram", "sweep"):
        raise ParameterError(f"unknown kernel method {method!r}")
    return method


def _center(phi: np.ndarray, eps: float):
    # centering cancels digits, so it and the normalization run in double;
    # only the neighborhood dot products use the working precision
    wide = phi.astype(np.float64)
    mean = channel_means(wide)
    centered = wide - mean[:, :, None, None]
    # channel-last copy so every per-pixel dot product runs over contiguous memory
    cl = np.ascontiguousarray(centered.transpose(0, 2, 3, 1))
    norms = np.sqrt(np.einsum("bhwc,bhwc->bhw", cl, cl))
    valid = norms >= eps
    unit = cl / np.where(valid, norms, 1)[..., None]
    unit[~valid] = 0
    dt = phi.dtype
    return mean.astype(dt), centered.astype(dt), norms.astype(dt), valid, unit.astype(dt)


def _sweep_forward(unit: np.ndarray, offsets, r: int, out: np.ndarray) -> None:
    b, h, w, c = unit.shape
    padded = np.zeros((b, h + 2 * r, w + 2 * r, c), dtype=unit.dtype)
    padded[:, r : r + h, r : r + w] = unit
    for k, (dy, dx) in enumerate(offsets):
        shifted = padded[:, r + dy : r + dy + h, r + dx : r + dx + w]
        np.einsum("bhwc,bhwc->bhw", shifted, unit, out=out[:, k])


def _gram_forward(unit: np.ndarray, idx: np.ndarray, out: np.ndarray) -> None:
    b, h, w, c = unit.shape
    n = h * w
    flat = unit.reshape(b, n, c)
    gram = np.zeros((b, n, n + 1), dtype=unit.dtype)
    gram[:, :, :n] = flat @ flat.transpose(0, 2, 1)
    rows = np.broadcast_to(np.arange(n), idx.shape)
    out.reshape(b, idx.shape[0], n)[...] = gram[:, rows, idx]


def nsl_forward(phi: np.ndarray, cfg: NslConfig, workers: int = 1, method: str = "auto"):
    """Similarity map and the cache for :func:`nsl_backward`.

    ``method`` selects the kernel: ``"gram"`` forms per-sample Gram matrices with
    one batched matrix product (fast on small grids), ``"sweep"`` loops over
    offsets with channel-contiguous dot products, ``"auto"`` chooses by grid size.
    Work is split over samples, so the result is identical for any ``workers``.
    """
    phi = check_tensor4(phi, "phi")
    if not np.all(np.isfinite(phi)):
        raise DataError("phi contains non-finite values")
    B, C, H, W = phi.shape
    nb = cfg.neighborhood
    method = _pick_method(method, H, W)
    eps = cfg.eps_for(phi.dtype)

    mean = np.empty((B, C), dtype=phi.dtype)
    centered = np.empty_like(phi)
    norms = np.empty((B, H, W), dtype=phi.dtype)
    valid = np.empty((B, H, W), dtype=bool)
    unit = np.empty((B, H, W, C), dtype=phi.dtype)
    psi = np.empty((B, nb.m, H, W), dtype=phi.dtype)
    idx = _neighbor_index(H, W, nb.offsets)

    def run(s: slice) -> None:
        mean[s], centered[s], norms[s], valid[s], unit[s] = _center(phi[s], eps)
        if method == "gram":
            _gram_forward(unit[s], idx, psi[s])
        else:
            _sweep_forward(unit[s], nb.offsets, nb.radius, psi[s])
        np.clip(psi[s], -1, 1, out=psi[s])

    map_batch(run, B, workers)
    return psi, NslCache(centered, norms, mean, unit, valid, method)


def _sweep_backward(g: np.ndarray, unit: np.ndarray, offsets, r: int) -> np.ndarray:
    b, h, w, c = unit.shape
    padded = np.zeros((b, h + 2 * r, w + 2 * r, c), dtype=unit.dtype)
    padded[:, r : r + h, r : r + w] = unit
    d_padded = np.zeros_like(padded)
    d_center = np.zeros_like(unit)
    for k, (dy, dx) in enumerate(offsets):
        gk = g[:, k, :, :, None]
        win = (slice(None), slice(r + dy, r + dy + h), slice(r + dx, r + dx + w))
        d_center += gk * padded[win]
        d_padded[win] += gk * unit
    return d_center + d_padded[:, r : r + h, r : r + w]


def _gram_backward(g: np.ndarray, unit: np.ndarray, idx: np.ndarray) -> np.ndarray:
    b, h, w, c = unit.shape
    n = h * w
    flat = unit.reshape(b, n, c)
    rows = np.broadcast_to(np.arange(n), idx.shape)
    d_gram = np.zeros((b, n, n + 1), dtype=unit.dtype)
    # offsets are unique, so only the discarded pad column can receive repeated writes
    d_gram[:, rows, idx] = g.reshape(b, idx.shape[0], n)
    d_gram = d_gram[:, :, :n]
    d_flat = d_gram @ flat + d_gram.transpose(0, 2, 1) @ flat
    return d_flat.reshape(b, h, w, c)


def nsl_backward(upstream: np.ndarray, cache: NslCache, cfg: NslConfig, workers: int = 1) -> np.ndarray:
    """Exact vector-Jacobian product of the full map phi -> psi.

    Includes the dependence of psi(x) on the center pixel, on each neighbor
    pixel and, through the per-sample mean, on every pixel of the sample.
    """
    B, C, H, W = cache.shape
    nb = cfg.neighborhood
    upstream = np.asarray(upstream)
    if upstream.shape != (B, nb.m, H, W):
        raise ShapeError(f"upstream shape {upstream.shape} does not match forward output {(B, nb.m, H, W)}")
    upstream = upstream.astype(cache.unit.dtype, copy=False)
    idx = _neighbor_index(H, W, nb.offsets)
    grad = np.empty((B, C, H, W), dtype=cache.unit.dtype)

    def run(s: slice) -> None:
        unit = cache.unit[s]
        if cache.method == "gram":
            d_unit = _gram_backward(upstream[s], unit, idx)
        else:
            d_unit = _sweep_backward(upstream[s], unit, nb.offsets, nb.radius)
        # through the normalization u = c / |c|
        radial = np.einsum("bhwc,bhwc->bhw", unit, d_unit)
        norms = np.where(cache.valid[s], cache.norms[s], 1)
        d_centered = (d_unit - unit * radial[..., None]) / norms[..., None]
        d_centered[~cache.valid[s]] = 0
        d_centered = np.ascontiguousarray(d_centered.transpose(0, 3, 1, 2))
        # through the centering c = phi - mean(phi)
        grad[s] = d_centered - channel_means(d_centered)[:, :, None, None]

    map_batch(run, B, workers)
    return grad


def nsl_diagonal_term(cache: NslCache, cfg: NslConfig, x: Sequence[int], v: Sequence[int], sample: int = 0) -> np.ndarray:
    """(1 - 1/|grid|) times the derivative of psi_v(x) with respect to the centered feature at x.

    This is the single-pixel expression usually quoted for this layer; it omits
    the neighbor and mean-coupling contributions that :func:`nsl_backward` adds.
    """
    _, _, H, W = cache.shape
    r, c = int(x[0]), int(x[1])
    dy, dx = int(v[0]), int(v[1])
    if not (0 <= r < H and 0 <= c < W):
        raise ParameterError(f"pixel {x} outside {H}x{W} grid")
    if (dy, dx) not in cfg.neighborhood.offsets:
        raise ParameterError(f"offset {v} not in the neighborhood")
    eps = cfg.eps_for(cache.centered.dtype)
    center = cache.centered[sample, :, r, c].astype(np.float64)
    rn, cn = r + dy, c + dx
    if 0 <= rn < H and 0 <= cn < W:
        neighbor = cache.centered[sample, :, rn, cn].astype(np.float64)
    else:
        neighbor = np.zeros_like(center)
    n_center = np.linalg.norm(center)
    n_neighbor = np.linalg.norm(neighbor)
    if n_center < eps or n_neighbor < eps:
        raise DegeneratePixelError(f"centered norm below epsilon at pixel {x} or its neighbor {(rn, cn)}")
    scale = 1.0 - 1.0 / (H * W)
    return scale * (
        neighbor / (n_neighbor * n_center)
        - np.dot(neighbor, center) * center / (n_neighbor * n_center**3)
    )


def nsl_forward_reference(phi: np.ndarray, cfg: NslConfig) -> np.ndarray:
    """Slow nested-loop evaluation of the layer in double, returned in the input dtype; a testing oracle."""
    phi = check_tensor4(phi, "phi")
    if not np.all(np.isfinite(phi)):
        raise DataError("phi contains non-finite values")
    B, C, H, W = phi.shape
    eps = cfg.eps_for(phi.dtype)
    offsets = cfg.neighborhood.offsets
    psi = np.zeros((B, len(offsets), H, W), dtype=phi.dtype)
    phi = phi.astype(np.float64)  # oracle arithmetic is always double
    for b in range(B):
        mean = np.zeros(C)
        for i in range(H):
            for j in range(W):
                mean += phi[b, :, i, j]
        mean /= H * W
        for k, (dy, dx) in enumerate(offsets):
            for i in range(H):
                for j in range(W):
                    if not (0 <= i + dy < H and 0 <= j + dx < W):
                        continue
                    center = phi[b, :, i, j] - mean
                    neighbor = phi[b, :, i + dy, j + dx] - mean
                    cc = np.dot(center, center)
                    nn = np.dot(neighbor, neighbor)
                    if np.sqrt(cc) < eps or np.sqrt(nn) < eps:
                        continue
                    psi[b, k, i, j] = np.dot(neighbor, center) / np.sqrt(nn * cc)
    return psi
