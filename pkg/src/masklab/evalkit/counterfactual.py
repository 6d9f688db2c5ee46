"""Counterfactual states from high-saliency regions, and region importance shares."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..baselines import _ref_image
from ..errors import DimensionError, UsageError

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class Counterfactual:
    state: np.ndarray
    region: np.ndarray
    modified: np.ndarray
    original_action: int
    new_action: int
    mass: float
    rank: int

    @property
    def changed(self):
        return self.new_action != self.original_action

    def summary(self):
        ys, xs = np.nonzero(self.region)
        return {"rank": self.rank, "mass": self.mass, "pixels": int(self.region.sum()),
                "bbox": [int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max())],
                "original_action": self.original_action, "new_action": self.new_action,
                "changed": self.changed}


def salient_regions(mask, theta=0.5):
    """4-connected components of ``mask >= theta * max``, heaviest first.

    Returns a list of ``(bool region, mass)``. Equal masses keep the
    row-major order of each component's first pixel.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if not 0 < theta <= 1:
        raise UsageError(f"theta must lie in (0, 1], got {theta}")
    peak = mask.max() if mask.size else 0.0
    if not peak > 0:
        return []
    labels, count = ndimage.label(mask >= theta * peak, structure=FOUR_CONNECTED)
    if count == 0:
        return []
    masses = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
    order = sorted(range(count), key=lambda i: -masses[i])
    return [(labels == i + 1, float(masses[i])) for i in order]


def remove_region(s, region, r):
    s = np.asarray(s, dtype=np.float32)
    if region.shape != s.shape[1:]:
        raise DimensionError(f"region {region.shape} does not match state {s.shape}")
    return np.where(region[None], _ref_image(r, s.shape), s)


def counterfactual(policy, s, masks, a, r, theta=0.5, top_r=3):
    """Remove each of the top-R regions of ``m_a`` in turn and re-run the policy."""
    s = np.asarray(s, dtype=np.float32)
    masks = np.asarray(masks)
    if masks.ndim != 3 or masks.shape[1:] != s.shape[1:]:
        raise DimensionError(f"masks {masks.shape} do not match state {s.shape}")
    if masks.min() < 0 or masks.max() > 1:
        raise UsageError("mask values must lie in [0, 1]")
    if top_r < 1:
        raise UsageError("top_r must be >= 1")
    regions = salient_regions(masks[a], theta)[:top_r]
    if not regions:
        return []
    original = int(np.argmax(policy.probabilities(s)))
    modified = np.stack([remove_region(s, reg, r) for reg, _ in regions])
    new = np.argmax(policy.probabilities(modified), axis=1)
    return [Counterfactual(s, reg, modified[i], original, int(new[i]), mass, i)
            for i, (reg, mass) in enumerate(regions)]


def region_importance(mask, regions, threshold=0.05):
    """Share of above-mean mask mass that falls on each named region.

    ``regions`` maps names to boolean pixel masks. Shares below
    ``threshold`` are dropped.
    """
    mask = np.asarray(mask, dtype=np.float64)
    kept = np.where(mask < mask.mean(), 0.0, mask)
    total = kept.sum()
    if not total > 0:
        return {}
    out = {}
    for name, region in regions.items():
        region = np.asarray(region, dtype=bool)
        if region.shape != mask.shape:
            raise DimensionError(f"region {name!r} has shape {region.shape}, mask {mask.shape}")
        share = float(kept[region].sum() / total)
        if share >= threshold:
            out[name] = share
    return out
