"""Plain-numpy resampling and pooling used by scoring and dataset loading."""

from __future__ import annotations

import numpy as np


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes with half-pixel-center sampling.

    Sample positions follow src = (dst + 0.5) * in/out - 0.5, clamped to
    the valid range (the corner-aligned convention is deliberately not
    used). Constant inputs stay exactly constant.
    """
    *lead, h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(arr.dtype, copy=False)
    wx = (xs - x0).astype(arr.dtype, copy=False)

    flat = arr.reshape(-1, h, w)
    top = flat[:, y0[:, None], x0[None, :]] * (1 - wy)[None, :, None] + flat[
        :, y1[:, None], x0[None, :]
    ] * wy[None, :, None]
    bot = flat[:, y0[:, None], x1[None, :]] * (1 - wy)[None, :, None] + flat[
        :, y1[:, None], x1[None, :]
    ] * wy[None, :, None]
    out = top * (1 - wx)[None, None, :] + bot * wx[None, None, :]
    return out.reshape(*lead, out_h, out_w)


def nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of the trailing two axes (for masks)."""
    *lead, h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ys = np.clip(((np.arange(out_h) + 0.5) * (h / out_h) - 0.5).round(), 0, h - 1)
    xs = np.clip(((np.arange(out_w) + 0.5) * (w / out_w) - 0.5).round(), 0, w - 1)
    flat = arr.reshape(-1, h, w)
    out = flat[:, ys.astype(np.intp)[:, None], xs.astype(np.intp)[None, :]]
    return out.reshape(*lead, out_h, out_w)


def box_mean_max(arr: np.ndarray, window: int) -> float:
    """Max over all stride-1 window x window mean pools (valid positions)."""
    h, w = arr.shape
    if window < 1:
        raise ValueError("pool window must be >= 1")
    if window > min(h, w):
        raise ValueError(f"pool window {window} exceeds map extent {h}x{w}")
    if window == 1:
        return float(arr.max())
    s = np.zeros((h + 1, w + 1), dtype=np.float64)
    s[1:, 1:] = np.cumsum(np.cumsum(arr, axis=0, dtype=np.float64), axis=1)
    k = window
    sums = s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]
    return float(sums.max() / (k * k))
