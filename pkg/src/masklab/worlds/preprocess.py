"""Grayscale conversion and area-average resizing of visual states."""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError, UsageError

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def rgb_to_grayscale(img):
    """Luma of a ``[3, H, W]`` image as ``[1, H, W]``."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected a [3, H, W] image, got shape {img.shape}")
    r, g, b = img.astype(np.float64)
    gray = GRAY_WEIGHTS[0] * r + GRAY_WEIGHTS[1] * g + GRAY_WEIGHTS[2] * b
    return np.clip(gray, 0.0, 1.0).astype(np.float32)[None]


def _area_matrix(n_in, n_out):
    # row o averages input cells [o*n_in/n_out, (o+1)*n_in/n_out), weighted by overlap
    edges = np.arange(n_out + 1) * (n_in / n_out)
    a = np.zeros((n_out, n_in))
    for o in range(n_out):
        lo, hi = edges[o], edges[o + 1]
        for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            a[o, i] = min(hi, i + 1) - max(lo, i)
    return a / a.sum(axis=1, keepdims=True)


def resize(img, out_h=84, out_w=84):
    """Box-filter downsampling of a ``[C, H, W]`` image; never upsamples."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise DimensionError(f"expected a [C, H, W] image, got shape {img.shape}")
    if out_h <= 0 or out_w <= 0:
        raise UsageError("target dimensions must be positive")
    _, h, w = img.shape
    if out_h > h or out_w > w:
        raise UsageError(f"upsampling {h}x{w} -> {out_h}x{out_w} is not supported")
    if (out_h, out_w) == (h, w):
        return img.astype(np.float32, copy=True)
    ah, aw = _area_matrix(h, out_h), _area_matrix(w, out_w)
    out = np.einsum("oh,chw,pw->cop", ah, img.astype(np.float64), aw)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def preprocess(img, size=84):
    """Grayscale (if RGB) then downsample to ``size`` x ``size``."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[None]
    if img.shape[0] == 3:
        img = rgb_to_grayscale(img)
    elif img.shape[0] != 1:
        raise DimensionError(f"expected 1 or 3 channels, got {img.shape[0]}")
    return resize(img, size, size)
