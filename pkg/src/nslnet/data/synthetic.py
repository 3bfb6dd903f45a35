"""Synthetic foreground/background images and dot-annotation targets."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import DataError, FormatError, ParameterError
from .variants import image_rng


@dataclass
class TwoRegionSpec:
    """Two-region image model: a centered disk of foreground on background.

    Feature vectors are i.i.d. Normal(mu_f, sigma_f^2 I) inside the disk and
    Normal(mu_b, sigma_b^2 I) outside. With ``radius`` unset the disk is the
    round(p_f * H * W) pixels closest to ``center``, so the realized foreground
    fraction matches ``p_f`` to within one pixel.
    """

    mu_f: Sequence[float]
    mu_b: Sequence[float]
    sigma_f: float = 0.0
    sigma_b: float = 0.0
    p_f: float = 0.5
    height: int = 64
    width: int = 64
    center: Optional[tuple] = None
    radius: Optional[float] = None

    def __post_init__(self):
        self.mu_f = np.atleast_1d(np.asarray(self.mu_f, dtype=np.float64))
        self.mu_b = np.atleast_1d(np.asarray(self.mu_b, dtype=np.float64))
        if self.mu_f.shape != self.mu_b.shape:
            raise ParameterError("mu_f and mu_b must have the same length")
        if self.sigma_f < 0 or self.sigma_b < 0:
            raise ParameterError("standard deviations must be >= 0")
        if not 0 < self.p_f < 1:
            raise ParameterError("p_f must lie in (0, 1)")
        if self.height < 1 or self.width < 1:
            raise ParameterError("grid extents must be >= 1")

    @property
    def channels(self) -> int:
        return self.mu_f.size

    @property
    def p_b(self) -> float:
        return 1.0 - self.p_f

    @property
    def separation_sq(self) -> float:
        return float(np.sum((self.mu_f - self.mu_b) ** 2))

    def check_discriminable(self) -> None:
        if self.separation_sq == 0:
            raise ParameterError("mu_f equals mu_b: regions are not discriminable")

    def mask(self) -> np.ndarray:
        h, w = self.height, self.width
        cy, cx = self.center if self.center is not None else ((h - 1) / 2, (w - 1) / 2)
        rows, cols = np.mgrid[:h, :w]
        dist = np.hypot(rows - cy, cols - cx)
        if self.radius is not None:
            return dist <= self.radius
        k = int(round(self.p_f * h * w))
        order = np.argsort(dist.ravel(), kind="stable")
        m = np.zeros(h * w, dtype=bool)
        m[order[:k]] = True
        return m.reshape(h, w)


def gen_two_region(spec: TwoRegionSpec, count: int, seed: int, dtype=np.float64, start: int = 0):
    """``count`` images of shape (n, H, W) plus the shared foreground mask.

    Image i is drawn from stream ``start + i`` so batches can be generated piecewise.
    """
    mask = spec.mask()
    n, h, w = spec.channels, spec.height, spec.width
    images = np.empty((count, n, h, w), dtype=dtype)
    mu = np.where(mask, spec.mu_f[:, None, None], spec.mu_b[:, None, None])
    sigma = np.where(mask, spec.sigma_f, spec.sigma_b)
    for i in range(count):
        noise = image_rng(seed, start + i).standard_normal((n, h, w))
        images[i] = mu + sigma * noise
    return images, mask


@dataclass
class DotAnnotation:
    """Point annotations per image: ``points[i]`` is a (k, 2) array of (row, col)."""

    points: list = field(default_factory=list)

    def __post_init__(self):
        self.points = [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in self.points]

    def __len__(self):
        return len(self.points)

    def check_in_grid(self, height: int, width: int) -> None:
        for i, p in enumerate(self.points):
            if p.size and ((p < 0).any() or (p[:, 0] > height - 1).any() or (p[:, 1] > width - 1).any()):
                raise DataError(f"image {i}: annotation outside the {height}x{width} grid")


def write_points(path, ann: DotAnnotation) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for i, pts in enumerate(ann.points):
            for r, c in pts:
                w.writerow([i, repr(float(r)), repr(float(c))])


def read_points(path, n_images: Optional[int] = None) -> DotAnnotation:
    """Parse ``image_id,row,col`` lines; blank lines and '#' comments are skipped."""
    per_image: dict[int, list] = {}
    with open(path, newline="") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            try:
                if len(parts) != 3:
                    raise ValueError
                img, r, c = int(parts[0]), float(parts[1]), float(parts[2])
                if img < 0 or not (np.isfinite(r) and np.isfinite(c)):
                    raise ValueError
            except ValueError:
                raise FormatError(f"{path}:{lineno}: expected 'image_id,row,col', got {line!r}") from None
            per_image.setdefault(img, []).append((r, c))
    n = max(per_image, default=-1) + 1 if n_images is None else n_images
    return DotAnnotation([per_image.get(i, []) for i in range(n)])


def gaussian_dot_targets(annotations: DotAnnotation, height: int, width: int, sigma: float, dtype=np.float32) -> np.ndarray:
    """(N, 1, H, W) maps equal to the max over points of exp(-d^2 / (2 sigma^2))."""
    if sigma <= 0:
        raise ParameterError("sigma must be > 0")
    annotations.check_in_grid(height, width)
    rows, cols = np.mgrid[:height, :width].astype(np.float64)
    out = np.zeros((len(annotations), 1, height, width), dtype=dtype)
    for i, pts in enumerate(annotations.points):
        for r, c in pts:
            bump = np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * sigma**2))
            np.maximum(out[i, 0], bump, out=out[i, 0])
    return out
