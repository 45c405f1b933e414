"""Grid resampling helpers shared by the backbone, adapter and heads.

Interpolation is expressed as precomputed matrices so that resampling a
tensor is a single matmul: deterministic, and differentiable when it sits
inside the autodiff graph (positional-encoding resampling, logit
upsampling). Sampling uses the half-pixel-center convention with clamped
edges.
"""

from __future__ import annotations

import functools

import numpy as np


def _keys_cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel (the standard bicubic weight)."""
    t = np.abs(t)
    out = np.zeros_like(t)
    m1 = t <= 1.0
    m2 = (t > 1.0) & (t < 2.0)
    out[m1] = (a + 2.0) * t[m1] ** 3 - (a + 3.0) * t[m1] ** 2 + 1.0
    out[m2] = a * t[m2] ** 3 - 5.0 * a * t[m2] ** 2 + 8.0 * a * t[m2] - 4.0 * a
    return out


def _axis_weights(src: int, dst: int, kind: str) -> np.ndarray:
    """dst x src interpolation weights along one axis."""
    w = np.zeros((dst, src))
    scale = src / dst
    centers = (np.arange(dst) + 0.5) * scale - 0.5
    if kind == "bilinear":
        lo = np.floor(centers).astype(int)
        frac = centers - lo
        for i in range(dst):
            j0 = min(max(lo[i], 0), src - 1)
            j1 = min(max(lo[i] + 1, 0), src - 1)
            w[i, j0] += 1.0 - frac[i]
            w[i, j1] += frac[i]
    elif kind == "bicubic":
        base = np.floor(centers).astype(int)
        for i in range(dst):
            taps = np.arange(base[i] - 1, base[i] + 3)
            weights = _keys_cubic(centers[i] - taps)
            for j, wt in zip(taps, weights):
                w[i, min(max(j, 0), src - 1)] += wt
    else:
        raise ValueError(f"unknown interpolation kind {kind!r}")
    return w


@functools.lru_cache(maxsize=256)
def resample_matrix(src_hw: tuple[int, int], dst_hw: tuple[int, int],
                    kind: str = "bicubic") -> np.ndarray:
    """(dst_h*dst_w) x (src_h*src_w) matrix resampling a row-major grid.

    Applying it to an (src_h*src_w, d) matrix of per-cell features yields
    the (dst_h*dst_w, d) resampled features, separably: M = Wh (x) Ww.
    """
    wh = _axis_weights(src_hw[0], dst_hw[0], kind)
    ww = _axis_weights(src_hw[1], dst_hw[1], kind)
    return np.kron(wh, ww)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) or (H, W) image."""
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    m = resample_matrix((h, w), (out_h, out_w), "bilinear")
    out = (m @ img.reshape(h * w, c)).reshape(out_h, out_w, c)
    return out[:, :, 0] if squeeze else out
