"""Forward-only perturbation saliency baselines.

None of these build a gradient graph: every policy call runs under
`no_grad` and the policy parameters are frozen.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import numeric as nm
from .errors import UsageError
from .worlds.dataset import ReferenceValue


@dataclass
class SaliencyMap:
    """Nonnegative ``[H, W]`` map normalised by its maximum (when positive)."""

    values: np.ndarray
    method: str
    action: int
    params: dict = field(default_factory=dict)
    scale: float = 1.0

    @classmethod
    def from_raw(cls, raw, method, action, params):
        raw = np.nan_to_num(np.asarray(raw, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)
        raw = np.maximum(raw, 0.0)
        peak = float(raw.max()) if raw.size else 0.0
        values = raw / peak if peak > 0 else raw
        return cls(values.astype(np.float32), method, int(action), dict(params), peak if peak > 0 else 1.0)

    @property
    def raw(self):
        return self.values * self.scale

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        nm.save_tensor(path, self.values)
        sidecar = {"method": self.method, "action": self.action, "params": self.params,
                   "scale": float(f"{self.scale:.9g}")}
        path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n",
                                             encoding="utf-8")


def _ref_image(r, shape):
    c, h, w = shape
    if isinstance(r, ReferenceValue):
        return r.image(c, h, w)
    return np.broadcast_to(np.asarray(r, dtype=np.float32).reshape(-1, 1, 1), (c, h, w)).astype(np.float32)


def _probs(policy, states, batch_size=256):
    with nm.no_grad():
        return policy.probabilities(states, batch_size=batch_size)


def _linear_resize_matrix(n_in, n_out):
    """Rows interpolate ``n_in`` samples onto ``n_out`` pixel centres (half-pixel aligned)."""
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def rise_masks(n_masks, height, width, cell_grid=7, p_keep=0.5, seed=0):
    """Random coarse binary grids, bilinearly upsampled and randomly shifted."""
    rng = np.random.default_rng(seed)
    cell_h = int(np.ceil(height / cell_grid))
    cell_w = int(np.ceil(width / cell_grid))
    grids = (rng.random((n_masks, cell_grid, cell_grid)) < p_keep).astype(np.float64)
    up_h, up_w = (cell_grid + 1) * cell_h, (cell_grid + 1) * cell_w
    ah, aw = _linear_resize_matrix(cell_grid, up_h), _linear_resize_matrix(cell_grid, up_w)
    shifts = rng.integers(0, [cell_h, cell_w], size=(n_masks, 2))
    out = np.empty((n_masks, height, width), dtype=np.float32)
    for i in range(n_masks):
        up = ah @ grids[i] @ aw.T
        dy, dx = shifts[i]
        out[i] = up[dy:dy + height, dx:dx + width]
    return out


def rise_saliency(policy, s, a, n_masks=2000, cell_grid=7, p_keep=0.5, seed=0, r=0.0, batch_size=256):
    if n_masks < 1:
        raise UsageError("n_masks must be >= 1")
    s = np.asarray(s, dtype=np.float32)
    c, h, w = s.shape
    ref = _ref_image(r, s.shape)
    total = np.zeros((h, w), dtype=np.float64)
    # masks are drawn in one stream so chunking never changes the result
    masks = rise_masks(n_masks, h, w, cell_grid, p_keep, seed)
    for start in range(0, n_masks, batch_size):
        m = masks[start:start + batch_size][:, None]
        p = _probs(policy, s[None] * m + ref[None] * (1 - m))[:, a]
        total += np.tensordot(p.astype(np.float64), m[:, 0].astype(np.float64), axes=1)
    raw = total / (n_masks * p_keep)
    params = {"n_masks": n_masks, "cell_grid": cell_grid, "p_keep": p_keep, "seed": seed}
    return SaliencyMap.from_raw(raw, "rise", a, params)


def gaussian_blur(s, sigma=3.0):
    """Separable Gaussian blur per channel, truncated at 3 sigma."""
    return np.stack([gaussian_filter(ch.astype(np.float64), sigma, mode="nearest", truncate=3.0)
                     for ch in s]).astype(np.float32)


def _grid_points(n, stride):
    pts = list(range(0, n, stride))
    if pts[-1] != n - 1:
        pts.append(n - 1)
    return np.asarray(pts)


def _spread(values, rows, cols, h, w):
    """Bilinear interpolation from grid samples to every pixel."""
    def weights(pts, n):
        m = np.zeros((n, len(pts)))
        for x in range(n):
            k = np.searchsorted(pts, x, side="right") - 1
            k = min(max(k, 0), len(pts) - 1)
            if pts[k] == x or k == len(pts) - 1:
                m[x, k] = 1.0
            else:
                t = (x - pts[k]) / (pts[k + 1] - pts[k])
                m[x, k], m[x, k + 1] = 1 - t, t
        return m

    return weights(rows, h) @ values @ weights(cols, w).T


def blur_saliency(policy, s, a, stride=5, sigma=3.0, r=None, batch_size=256):
    """|p_a(s) - p_a(s with a local blur patch)| sampled every ``stride`` pixels.

    ``r`` is accepted for a uniform signature and ignored: the perturbation
    moves toward the blurred state, not a reference value.
    """
    if stride < 1:
        raise UsageError("stride must be >= 1")
    s = np.asarray(s, dtype=np.float32)
    c, h, w = s.shape
    blurred = gaussian_blur(s, sigma)
    base = _probs(policy, s[None])[0, a]
    rows, cols = _grid_points(h, stride), _grid_points(w, stride)
    yy, xx = np.mgrid[0:h, 0:w]
    centres = [(y, x) for y in rows for x in cols]
    scores = np.empty(len(centres))
    for start in range(0, len(centres), batch_size):
        chunk = centres[start:start + batch_size]
        patch = np.stack([np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2 * sigma ** 2)) for y, x in chunk])
        patch = patch[:, None].astype(np.float32)
        perturbed = s[None] * (1 - patch) + blurred[None] * patch
        scores[start:start + len(chunk)] = np.abs(base - _probs(policy, perturbed)[:, a])
    raw = _spread(scores.reshape(len(rows), len(cols)), rows, cols, h, w)
    return SaliencyMap.from_raw(raw, "blur", a, {"stride": stride, "sigma": sigma})


def _occlusion_windows(h, w, patch, stride):
    if patch < 1 or patch > min(h, w):
        raise UsageError(f"patch must be in [1, {min(h, w)}], got {patch}")
    tops = list(range(0, h - patch + 1, stride))
    lefts = list(range(0, w - patch + 1, stride))
    return [(t, l) for t in tops for l in lefts]


def _occlusion_scores(policy, s, a, patch, r, stride, batch_size, score):
    s = np.asarray(s, dtype=np.float32)
    c, h, w = s.shape
    ref = _ref_image(r, s.shape)
    base = _probs(policy, s[None])[0]
    windows = _occlusion_windows(h, w, patch, stride)
    acc = np.zeros((h, w))
    hits = np.zeros((h, w))
    for start in range(0, len(windows), batch_size):
        chunk = windows[start:start + batch_size]
        batch = np.repeat(s[None], len(chunk), axis=0)
        for k, (t, l) in enumerate(chunk):
            batch[k, :, t:t + patch, l:l + patch] = ref[:, t:t + patch, l:l + patch]
        probs = _probs(policy, batch)
        for k, (t, l) in enumerate(chunk):
            acc[t:t + patch, l:l + patch] += score(base, probs[k], a)
            hits[t:t + patch, l:l + patch] += 1
    return np.where(hits > 0, acc / np.maximum(hits, 1), 0.0)


def occlusion_saliency(policy, s, a, patch=5, r=0.0, stride=1, batch_size=256):
    """Mean over covering windows of ``max(0, p_a(s) - p_a(occluded))``."""
    raw = _occlusion_scores(policy, s, a, patch, r, stride, batch_size,
                            lambda base, p, k: max(0.0, float(base[k] - p[k])))
    return SaliencyMap.from_raw(raw, "occlusion", a, {"patch": patch, "stride": stride})


def non_target_tvd(before, after, a):
    """Total variation distance between renormalised non-target distributions."""
    keep = np.arange(len(before)) != a
    q0, q1 = before[keep].astype(np.float64), after[keep].astype(np.float64)
    s0, s1 = q0.sum(), q1.sum()
    if s0 <= 0 or s1 <= 0:
        return 0.0
    return 0.5 * float(np.abs(q0 / s0 - q1 / s1).sum())


def normalized_delta_score(before, after, a):
    delta = max(0.0, float(before[a] - after[a]))
    return delta / (1.0 + non_target_tvd(before, after, a))


def normalized_delta_saliency(policy, s, a, patch=5, r=0.0, stride=1, batch_size=256):
    """Occlusion delta on ``a`` shrunk by how much the other actions reshuffle."""
    raw = _occlusion_scores(policy, s, a, patch, r, stride, batch_size, normalized_delta_score)
    return SaliencyMap.from_raw(raw, "normalized-delta", a, {"patch": patch, "stride": stride})


METHODS = {
    "rise": rise_saliency,
    "blur": blur_saliency,
    "occlusion": occlusion_saliency,
    "delta": normalized_delta_saliency,
}
