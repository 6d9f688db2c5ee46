"""Insertion and deletion curves: reveal or remove pixels in descending mask order."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..baselines import _ref_image
from ..errors import DimensionError, UsageError

DEFAULT_FRACTIONS = (0.25, 0.5, 1.0)


@dataclass
class InsDelCurve:
    kind: str
    alpha: float
    step: int
    x: np.ndarray
    probs: np.ndarray
    auc: float

    def as_dict(self):
        return {"kind": self.kind, "alpha": self.alpha, "step": self.step,
                "x": self.x.tolist(), "probs": self.probs.tolist(), "auc": self.auc}


def pixel_order(mask):
    """Flat pixel indices by descending importance; ties keep row-major order."""
    return np.argsort(-np.asarray(mask, dtype=np.float64).ravel(), kind="stable")


def default_step(n_pixels):
    return max(1, math.ceil(n_pixels / 100))


def trapezoid_auc(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 2:
        return float(y[0]) if len(y) else 0.0
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def _curve(kind, mask, s, a, policy, r, alpha, step, per_pixel, chunk):
    s = np.asarray(s, dtype=np.float32)
    if s.ndim != 3:
        raise DimensionError(f"expected a [C, H, W] state, got {s.shape}")
    c, h, w = s.shape
    mask = np.asarray(mask)
    if mask.shape != (h, w):
        raise DimensionError(f"mask shape {mask.shape} does not match state {s.shape}")
    if not 0 < alpha <= 1:
        raise UsageError(f"fraction must lie in (0, 1], got {alpha}")
    n = max(1, int(round(alpha * h * w)))
    if per_pixel:
        step = 1
    elif step is None:
        step = default_step(n)
    if step <= 0:
        raise UsageError(f"step must be positive, got {step}")
    ks = np.arange(0, n + 1, step)
    if ks[-1] != n:
        ks = np.append(ks, n)
    rank = np.empty(h * w, dtype=np.int64)
    rank[pixel_order(mask)] = np.arange(h * w)
    flat_s = s.reshape(c, h * w)
    flat_r = _ref_image(r, s.shape).reshape(c, h * w)
    probs = np.empty(len(ks), dtype=np.float64)
    for i in range(0, len(ks), chunk):
        kk = ks[i:i + chunk]
        touched = rank[None, :] < kk[:, None]
        keep = touched if kind == "insertion" else ~touched
        states = np.where(keep[:, None, :], flat_s[None], flat_r[None]).reshape(len(kk), c, h, w)
        probs[i:i + len(kk)] = policy.probabilities(states)[:, a]
    x = ks / n
    return InsDelCurve(kind, float(alpha), int(step), x, probs, trapezoid_auc(x, probs))


def insertion_auc(mask, s, a, policy, r, alpha=1.0, step=None, per_pixel=False, chunk=256):
    """Start from the reference image and reveal the most important pixels first."""
    return _curve("insertion", mask, s, a, policy, r, alpha, step, per_pixel, chunk)


def deletion_auc(mask, s, a, policy, r, alpha=1.0, step=None, per_pixel=False, chunk=256):
    """Start from the state and replace the most important pixels with the reference first."""
    return _curve("deletion", mask, s, a, policy, r, alpha, step, per_pixel, chunk)


def insdel_curves(mask, s, a, policy, r, fractions=DEFAULT_FRACTIONS, step=None, per_pixel=False):
    """Both curves at every fraction, keyed ``(kind, alpha)``."""
    out = {}
    for alpha in fractions:
        out[("insertion", float(alpha))] = insertion_auc(mask, s, a, policy, r, alpha, step, per_pixel)
        out[("deletion", float(alpha))] = deletion_auc(mask, s, a, policy, r, alpha, step, per_pixel)
    return out
