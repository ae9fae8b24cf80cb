"""Differentiable bilinear backward warping with replicated borders.

warp(z, flow) samples z at position p + flow(p); flow's last axis is
(dx, dy) in pixels. Integer flows reproduce exact shifts (no interpolation
residue), and the op is linear in z so autograd gradients are exact.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import ContractError


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def warp(z: torch.Tensor, flow) -> torch.Tensor:
    """Warp a (C, H, W) tensor by an (H, W, 2) displacement field."""
    if z.ndim != 3:
        raise ContractError(f"warp expects (C, H, W), got shape {tuple(z.shape)}")
    c, h, w = z.shape
    flow = _as_tensor(flow, dtype=z.dtype)
    if flow.shape != (h, w, 2):
        raise ContractError(f"flow shape {tuple(flow.shape)} != ({h}, {w}, 2)")
    if not z.requires_grad and not flow.any():
        return z.clone()

    yy, xx = torch.meshgrid(
        torch.arange(h, dtype=z.dtype),
        torch.arange(w, dtype=z.dtype),
        indexing="ij",
    )
    gx = xx + flow[:, :, 0]
    gy = yy + flow[:, :, 1]

    x0 = torch.floor(gx)
    y0 = torch.floor(gy)
    fx = (gx - x0).unsqueeze(0)
    fy = (gy - y0).unsqueeze(0)

    x0c = x0.long().clamp(0, w - 1)
    x1c = (x0.long() + 1).clamp(0, w - 1)
    y0c = y0.long().clamp(0, h - 1)
    y1c = (y0.long() + 1).clamp(0, h - 1)

    v00 = z[:, y0c, x0c]
    v01 = z[:, y0c, x1c]
    v10 = z[:, y1c, x0c]
    v11 = z[:, y1c, x1c]

    top = (1 - fx) * v00 + fx * v01
    bot = (1 - fx) * v10 + fx * v11
    return (1 - fy) * top + fy * bot


def warp_numpy(z: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Convenience wrapper for (H, W, C) numpy frames."""
    t = torch.from_numpy(np.ascontiguousarray(z, dtype=np.float64).transpose(2, 0, 1))
    out = warp(t, flow)
    return out.numpy().transpose(1, 2, 0)
