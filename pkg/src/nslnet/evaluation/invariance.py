"""Monte-Carlo check of the layer's behaviour on two-region images.

With the center pixel in the foreground, the centered inner product with a
foreground neighbor has expectation P_b^2 |mu_f - mu_b|^2, and with a
background neighbor -P_f P_b |mu_f - mu_b|^2. As the region variances shrink
the normalized similarities approach +1 and -1.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from ..data.synthetic import TwoRegionSpec, gen_two_region
from ..nsl import NslConfig, nsl_forward
from .features import downsample_mask


@dataclass
class InvarianceReport:
    mean_sim_same: float
    mean_sim_cross: float
    mean_numerator_same: float
    mean_numerator_cross: float
    predicted_numerator_same: float
    predicted_numerator_cross: float
    sample_count: int
    images_used: int = 0

    def relative_error(self, which: str) -> float:
        est = getattr(self, f"mean_numerator_{which}")
        pred = getattr(self, f"predicted_numerator_{which}")
        return abs(est - pred) / abs(pred)

    def rows(self):
        """(quantity, predicted, estimated, relative deviation) rows for tabular output."""
        return [
            ("numerator_same", self.predicted_numerator_same, self.mean_numerator_same, self.relative_error("same")),
            ("numerator_cross", self.predicted_numerator_cross, self.mean_numerator_cross, self.relative_error("cross")),
            ("similarity_same", 1.0, self.mean_sim_same, abs(self.mean_sim_same - 1.0)),
            ("similarity_cross", -1.0, self.mean_sim_cross, abs(self.mean_sim_cross + 1.0)),
        ]

    def as_dict(self) -> dict:
        return asdict(self)


def _pairs(mask: np.ndarray, offsets):
    """Yield (k, center flat indices, neighbor flat indices, neighbor-is-foreground) for fg centers."""
    h, w = mask.shape
    rows, cols = np.nonzero(mask)
    for k, (dy, dx) in enumerate(offsets):
        r, c = rows + dy, cols + dx
        inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        center = rows[inside] * w + cols[inside]
        neighbor = r[inside] * w + c[inside]
        yield k, center, neighbor, mask.ravel()[neighbor]


def invariance_report(spec: TwoRegionSpec, cfg: NslConfig, feature_fn: Optional[Callable] = None,
                      samples: int = 100_000, seed: int = 0, max_images: int = 100_000) -> InvarianceReport:
    """Estimate same/cross-region numerators and similarities from in-grid pixel pairs.

    Images are drawn until each stratum has at least ``samples`` pairs; the
    first ``samples`` pairs of each are averaged. ``feature_fn`` maps a
    (1, n, H, W) image to a (1, n', H', W') feature map (identity if None).
    """
    spec.check_discriminable()
    same = {"num": [], "sim": [], "ok": []}
    cross = {"num": [], "sim": [], "ok": []}
    n_same = n_cross = 0
    used = 0
    while (n_same < samples or n_cross < samples) and used < max_images:
        image, mask = gen_two_region(spec, 1, seed, start=used)
        used += 1
        feats = image if feature_fn is None else np.asarray(feature_fn(image), dtype=np.float64)
        _, _, h, w = feats.shape
        fmask = downsample_mask(mask, h, w)
        psi, cache = nsl_forward(feats, cfg)
        centered = cache.centered[0].reshape(feats.shape[1], h * w)
        valid = cache.valid[0].ravel()
        sims = psi[0].reshape(len(cfg.neighborhood), h * w)
        for k, center, neighbor, nb_fg in _pairs(fmask, cfg.neighborhood.offsets):
            num = np.einsum("ci,ci->i", centered[:, center], centered[:, neighbor])
            ok = valid[center] & valid[neighbor]
            for bucket, sel in ((same, nb_fg), (cross, ~nb_fg)):
                bucket["num"].append(num[sel])
                bucket["sim"].append(sims[k, center[sel]])
                bucket["ok"].append(ok[sel])
            n_same += int(nb_fg.sum())
            n_cross += int((~nb_fg).sum())
    count = min(samples, n_same, n_cross)
    if count == 0:
        raise ValueError("no foreground/background pixel pairs found; check the disk geometry")

    def summarize(bucket):
        num = np.concatenate(bucket["num"])[:count]
        sim = np.concatenate(bucket["sim"])[:count]
        ok = np.concatenate(bucket["ok"])[:count]
        return float(num.mean()), float(sim[ok].mean()) if ok.any() else 0.0

    num_same, sim_same = summarize(same)
    num_cross, sim_cross = summarize(cross)
    sep = spec.separation_sq
    return InvarianceReport(
        mean_sim_same=sim_same,
        mean_sim_cross=sim_cross,
        mean_numerator_same=num_same,
        mean_numerator_cross=num_cross,
        predicted_numerator_same=spec.p_b**2 * sep,
        predicted_numerator_cross=-spec.p_f * spec.p_b * sep,
        sample_count=count,
        images_used=used,
    )
