"""Classical dense optical flow: coarse-to-fine regularized Lucas-Kanade.

estimate_flow(a, b) returns a field f (H x W x 2, last axis = (dx, dy) in
pixels) such that sampling b at p + f(p) reconstructs a, i.e.
``warp(b, f) ~ a``. The solver runs on an image pyramid; at each level it
iterates warped incremental updates from windowed normal equations with a
Tikhonov term (which pins the flow to zero wherever there is no texture)
and smooths the field between iterations.

Deterministic, pure numpy. A pluggable replacement only has to honour the
same convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi

from .errors import ContractError

MIN_LEVEL_SIZE = 8


@dataclass
class FlowPair:
    """Dense displacement fields between consecutive frames of an N-frame clip.

    forward[i]: field on frame i's grid pointing into frame i+1
    (warp(Z[i+1], forward[i]) ~ Z[i]). backward[i]: field on frame i+1's
    grid pointing into frame i (warp(Z[i], backward[i]) ~ Z[i+1]).
    """

    forward: list[np.ndarray]
    backward: list[np.ndarray]

    def __post_init__(self):
        if len(self.forward) != len(self.backward):
            raise ContractError("forward/backward field counts differ")
        for f in [*self.forward, *self.backward]:
            if f.ndim != 3 or f.shape[2] != 2:
                raise ContractError(f"flow field must be HxWx2, got {f.shape}")
            if not np.all(np.isfinite(f)):
                raise ContractError("flow field contains non-finite values")

    @property
    def num_pairs(self) -> int:
        return len(self.forward)


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    return img


def _downsample2(img: np.ndarray) -> np.ndarray:
    sm = ndi.gaussian_filter(img, sigma=1.0, mode="nearest")
    return sm[::2, ::2]


def _bilinear(img: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    h, w = img.shape
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    fx = gx - x0
    fy = gy - y0
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    top = (1 - fx) * img[y0c, x0c] + fx * img[y0c, x1c]
    bot = (1 - fx) * img[y1c, x0c] + fx * img[y1c, x1c]
    return (1 - fy) * top + fy * bot


def _refine(a: np.ndarray, b: np.ndarray, flow: np.ndarray, iterations: int,
            window: int, reg: float, smooth_sigma: float) -> np.ndarray:
    h, w = a.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(iterations):
        bw = _bilinear(b, xx + flow[:, :, 0], yy + flow[:, :, 1])
        gy, gx = np.gradient(bw)
        it = bw - a
        size = (window, window)
        a11 = ndi.uniform_filter(gx * gx, size, mode="nearest") + reg
        a12 = ndi.uniform_filter(gx * gy, size, mode="nearest")
        a22 = ndi.uniform_filter(gy * gy, size, mode="nearest") + reg
        b1 = -ndi.uniform_filter(gx * it, size, mode="nearest")
        b2 = -ndi.uniform_filter(gy * it, size, mode="nearest")
        det = a11 * a22 - a12 * a12
        du = (a22 * b1 - a12 * b2) / det
        dv = (a11 * b2 - a12 * b1) / det
        flow = flow + np.stack([du, dv], axis=2)
        if smooth_sigma > 0:
            flow = ndi.gaussian_filter(flow, sigma=(smooth_sigma, smooth_sigma, 0), mode="nearest")
    return flow


def estimate_flow(a: np.ndarray, b: np.ndarray, pyramid_levels: int = 3,
                  iterations: int = 4, window: int = 7, reg: float = 1e-4,
                  smooth_sigma: float = 1.0) -> np.ndarray:
    """Dense flow from a toward b; see module docstring for the convention."""
    ga = _to_gray(a)
    gb = _to_gray(b)
    if ga.shape != gb.shape:
        raise ContractError(f"frame dims differ: {ga.shape} vs {gb.shape}")

    pyr_a = [ga]
    pyr_b = [gb]
    while (
        len(pyr_a) < pyramid_levels
        and min(pyr_a[-1].shape) >= 2 * MIN_LEVEL_SIZE
    ):
        pyr_a.append(_downsample2(pyr_a[-1]))
        pyr_b.append(_downsample2(pyr_b[-1]))

    flow = np.zeros((*pyr_a[-1].shape, 2), dtype=np.float64)
    for level in range(len(pyr_a) - 1, -1, -1):
        if level < len(pyr_a) - 1:
            h, w = pyr_a[level].shape
            up = np.stack(
                [
                    _bilinear(flow[:, :, 0],
                              *np.meshgrid(np.arange(w) / 2.0, np.arange(h) / 2.0)),
                    _bilinear(flow[:, :, 1],
                              *np.meshgrid(np.arange(w) / 2.0, np.arange(h) / 2.0)),
                ],
                axis=2,
            )
            flow = 2.0 * up
        flow = _refine(pyr_a[level], pyr_b[level], flow, iterations, window, reg, smooth_sigma)
    return flow


def clip_flows(frames: list[np.ndarray], pyramid_levels: int = 3,
               iterations: int = 4) -> FlowPair | None:
    """Bidirectional flow over all consecutive pairs; None for a single frame."""
    n = len(frames)
    if n < 2:
        return None
    fwd = []
    bwd = []
    for i in range(n - 1):
        fwd.append(estimate_flow(frames[i], frames[i + 1],
                                 pyramid_levels=pyramid_levels, iterations=iterations))
        bwd.append(estimate_flow(frames[i + 1], frames[i],
                                 pyramid_levels=pyramid_levels, iterations=iterations))
    return FlowPair(forward=fwd, backward=bwd)
