"""Per-frame adaptive instance normalization against the upsampled LQ frame.

Diffusion decoders drift in color; restyling each output channel to the
reference's mean/std pins illumination back to the input.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

EPS = 1e-6


def color_correct(x_sr: np.ndarray, x_ref: np.ndarray, eps: float = EPS) -> np.ndarray:
    """out_c = (x_c - mean_c) / max(std_c, eps) * ref_std_c + ref_mean_c, clamped."""
    x_sr = np.asarray(x_sr, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x_sr.shape != x_ref.shape:
        raise ContractError(f"frame dims differ: {x_sr.shape} vs {x_ref.shape}")
    mu_s = x_sr.mean(axis=(0, 1), keepdims=True)
    sd_s = x_sr.std(axis=(0, 1), keepdims=True)
    mu_r = x_ref.mean(axis=(0, 1), keepdims=True)
    sd_r = x_ref.std(axis=(0, 1), keepdims=True)
    out = (x_sr - mu_s) / np.maximum(sd_s, eps) * sd_r + mu_r
    return np.clip(out, 0.0, 1.0)
