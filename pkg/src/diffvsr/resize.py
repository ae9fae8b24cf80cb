"""Separable Keys-cubic resampling (a = -0.5) with replicate borders.

Downscaling widens the kernel by the scale factor (anti-aliased
decimation); upscaling uses the plain cubic kernel. Output sample i maps
to source coordinate (i + 0.5) * scale - 0.5, weights renormalised to sum
to one so constant images are exactly invariant.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    out = np.zeros_like(ax)
    inner = ax <= 1.0
    outer = (ax > 1.0) & (ax < 2.0)
    out[inner] = (a + 2.0) * ax[inner] ** 3 - (a + 3.0) * ax[inner] ** 2 + 1.0
    out[outer] = a * ax[outer] ** 3 - 5.0 * a * ax[outer] ** 2 + 8.0 * a * ax[outer] - 4.0 * a
    return out


def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) row-stochastic resampling matrix along one axis."""
    scale = n_in / n_out
    support = 2.0 * max(scale, 1.0)
    width = max(scale, 1.0)
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        lo = int(np.floor(center - support)) + 1
        hi = int(np.ceil(center + support))
        j = np.arange(lo, hi + 1)
        k = cubic_kernel((j - center) / width)
        jc = np.clip(j, 0, n_in - 1)
        np.add.at(w[i], jc, k)
        s = w[i].sum()
        w[i] /= s
    return w


def resize_bicubic(frame: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W, C) or (H, W) array; returns float64, not clipped."""
    frame = np.asarray(frame, dtype=np.float64)
    squeeze = frame.ndim == 2
    if squeeze:
        frame = frame[:, :, None]
    h, w, _ = frame.shape
    if (h, w) == (out_h, out_w):
        out = frame.copy()
        return out[:, :, 0] if squeeze else out
    wh = _axis_weights(h, out_h)
    ww = _axis_weights(w, out_w)
    out = np.einsum("ij,jwc->iwc", wh, frame)
    out = np.einsum("kw,iwc->ikc", ww, out)
    return out[:, :, 0] if squeeze else out


def downscale(frame: np.ndarray, factor: int) -> np.ndarray:
    h, w = frame.shape[:2]
    if h % factor or w % factor:
        raise ContractError(
            f"dims {h}x{w} not divisible by factor {factor}; pad to multiples first"
        )
    return resize_bicubic(frame, h // factor, w // factor)


def upscale(frame: np.ndarray, factor: int) -> np.ndarray:
    h, w = frame.shape[:2]
    return resize_bicubic(frame, h * factor, w * factor)
