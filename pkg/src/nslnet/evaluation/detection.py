"""Point-detection scoring: local maxima extraction and Hungarian matching."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..data.synthetic import DotAnnotation
from ..errors import ParameterError, ShapeError
from .hungarian import hungarian

MAX_DIST = 5.0
SENTINEL_FACTOR = 1e6


def f_score(precision: float, recall: float) -> float:
    """Harmonic mean 2pr / (p + r), with 0 when both are 0."""
    s = precision + recall
    return 0.0 if s == 0 else 2 * precision * recall / s


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (pred index, gt index, distance)
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        if self.tp + self.fp == 0:
            return 1.0 if self.fn == 0 else 0.0
        return self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        if self.tp + self.fn == 0:
            return 1.0 if self.fp == 0 else 0.0
        return self.tp / (self.tp + self.fn)

    @property
    def f_score(self) -> float:
        return f_score(self.precision, self.recall)

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(self.pairs + other.pairs, self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def match_detections(pred, gt, max_dist: float = MAX_DIST) -> MatchResult:
    """Optimal one-to-one matching of predicted to ground-truth points within ``max_dist``.

    Pairs farther apart than ``max_dist`` get a cost so large that the solver
    only uses them when nothing else is left, and are then dropped.
    """
    if not max_dist > 0:
        raise ParameterError("max_dist must be > 0")
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(pred) == 0 or len(gt) == 0:
        return MatchResult([], 0, len(pred), len(gt))
    dist = np.hypot(pred[:, None, 0] - gt[None, :, 0], pred[:, None, 1] - gt[None, :, 1])
    allowed = dist <= max_dist
    top = float(dist[allowed].max()) if allowed.any() else 0.0
    cost = np.where(allowed, dist, SENTINEL_FACTOR * max(top, 1.0))
    assignment, _ = hungarian(cost)
    pairs = [(p, g, float(dist[p, g])) for p, g in assignment if allowed[p, g]]
    tp = len(pairs)
    return MatchResult(pairs, tp, len(pred) - tp, len(gt) - tp)


def match_annotations(pred: DotAnnotation, gt: DotAnnotation, max_dist: float = MAX_DIST) -> MatchResult:
    """Per-image matching summed over a set of images."""
    if len(pred) != len(gt):
        raise ShapeError(f"{len(pred)} predicted images vs {len(gt)} ground-truth images")
    total = MatchResult()
    for p, g in zip(pred.points, gt.points):
        total = total + match_detections(p, g, max_dist)
    return total


def _local_maxima_2d(img: np.ndarray, min_value: float, min_separation: float) -> np.ndarray:
    h, w = img.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = img
    strict = np.ones((h, w), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy or dx:
                strict &= img > padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
    strict &= img >= min_value
    rows, cols = np.nonzero(strict)  # row-major
    order = np.argsort(-img[rows, cols], kind="stable")
    kept: list[tuple[int, int]] = []
    for k in order:
        r, c = rows[k], cols[k]
        if all((r - kr) ** 2 + (c - kc) ** 2 >= min_separation**2 for kr, kc in kept):
            kept.append((r, c))
    return np.array(kept, dtype=np.float64).reshape(-1, 2)


def local_maxima(density, min_value: float = 0.5, min_separation: float = 3.0) -> DotAnnotation:
    """Strict 8-neighborhood maxima per image, pruned greedily from the highest value down.

    ``density`` is a 2-D map or a (N, 1, H, W) tensor. A candidate closer than
    ``min_separation`` to an already kept maximum is discarded.
    """
    d = np.asarray(density, dtype=np.float64)
    if d.ndim == 2:
        d = d[None, None]
    if d.ndim != 4 or d.shape[1] != 1:
        raise ShapeError(f"density must be a 2-D map or (N, 1, H, W), got {d.shape}")
    return DotAnnotation([_local_maxima_2d(img[0], min_value, min_separation) for img in d])
