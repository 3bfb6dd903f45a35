"""Per-channel statistics of feature maps, stratified by foreground/background.

Used to compare how much the statistics of a layer's output move when the
input appearance changes. The dispersion score is scale free, so raw
features and similarity maps can be compared directly:

    dispersion = mean over channels and regions of
                 std_across_variants(region mean of channel c) / std_reference(channel c)

where std_reference is the channel's pixel standard deviation on the reference variant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError

STATS = ("mean", "std", "q05", "q50", "q95")
REGIONS = ("all", "fg", "bg")


@dataclass
class FeatureStats:
    """``table[region][stat]`` is a (channels,) array; ``count[region]`` is the pixel count."""

    table: dict
    count: dict

    @property
    def channels(self) -> int:
        return len(self.table["all"]["mean"])

    def rows(self, label: str = ""):
        for region in REGIONS:
            for c in range(self.channels):
                yield [label, region, c, self.count[region]] + [float(self.table[region][s][c]) for s in STATS]


def _summary(values: np.ndarray) -> dict:
    """values: (channels, pixels)."""
    if values.shape[1] == 0:
        nan = np.full(values.shape[0], np.nan)
        return {s: nan for s in STATS}
    q = np.quantile(values, [0.05, 0.5, 0.95], axis=1)
    return {"mean": values.mean(axis=1), "std": values.std(axis=1), "q05": q[0], "q50": q[1], "q95": q[2]}


def feature_stats(maps: np.ndarray, mask: np.ndarray) -> FeatureStats:
    maps = np.asarray(maps, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if maps.ndim != 4:
        raise ShapeError(f"maps must be (N, C, H, W), got {maps.shape}")
    if mask.ndim == 2:
        mask = np.broadcast_to(mask, (maps.shape[0],) + mask.shape)
    if mask.shape != (maps.shape[0],) + maps.shape[2:]:
        raise ShapeError(f"mask shape {mask.shape} does not match maps {maps.shape}")
    per_channel = maps.transpose(1, 0, 2, 3).reshape(maps.shape[1], -1)
    flat = mask.reshape(-1)
    table = {
        "all": _summary(per_channel),
        "fg": _summary(per_channel[:, flat]),
        "bg": _summary(per_channel[:, ~flat]),
    }
    count = {"all": flat.size, "fg": int(flat.sum()), "bg": int((~flat).sum())}
    return FeatureStats(table, count)


def variant_dispersion(stats: dict, reference: str, floor: float = 1e-6) -> float:
    """Scale-free spread of region means across variants (see module docstring)."""
    ref_std = stats[reference].table["all"]["std"]
    live = ref_std > floor
    if not live.any():
        return 0.0
    scores = []
    for region in ("fg", "bg"):
        means = np.stack([s.table[region]["mean"] for s in stats.values()])
        scores.append(means.std(axis=0)[live] / ref_std[live])
    return float(np.nanmean(np.concatenate(scores)))


def downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-center resampling of (N, H, W) masks onto an h x w grid."""
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape[-2:]
    rows = ((np.arange(h) + 0.5) * H / h).astype(int)
    cols = ((np.arange(w) + 0.5) * W / w).astype(int)
    return mask[..., rows[:, None], cols[None, :]]
