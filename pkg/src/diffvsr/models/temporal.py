"""Temporal fusion inside the frame decoder, and encoder/decoder feature fusion.

The fusion wraps one (frozen) decoder stage and interleaves a 3D conv and
cross-frame attention between its residual blocks:

    h   = res1(conv(x))                       per frame
    h'  = a * Conv3D(h) + (1 - a) * h         a = clamp(alpha, 0, 1)
    out = res2(b * TA(h') + (1 - b) * h')     b = clamp(beta, 0, 1)

alpha/beta are per-channel and start at zero, so a fresh module computes
exactly the stage's plain spatial path. Temporal attention treats the
frames at each spatial site as tokens; queries/keys are projections of
the normalized tokens but the values are the raw tokens themselves, so a
single-frame clip passes through unchanged.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from ..errors import ContractError
from .layers import zero_module
from .vae import DecoderStage


class TemporalAttention(nn.Module):
    """Single-head attention across the frame axis at every spatial site."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.scale = channels**-0.5

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (N, C, H, W), the batch axis is the clip's frame axis
        n, c, h, w = x.shape
        tokens = x.permute(2, 3, 0, 1)  # (H, W, N, C)
        normed = self.norm(tokens)
        attn = torch.softmax(
            self.q(normed) @ self.k(normed).transpose(-2, -1) * self.scale, dim=-1
        )
        out = attn @ tokens
        return out.permute(2, 3, 0, 1)


class TemporalFusion(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.alpha_raw = nn.Parameter(torch.zeros(channels))
        self.beta_raw = nn.Parameter(torch.zeros(channels))
        self.conv3d = nn.Conv3d(channels, channels, 3, padding=1)
        self.attn = TemporalAttention(channels)

    @property
    def alpha(self) -> torch.Tensor:
        return self.alpha_raw.clamp(0.0, 1.0)

    @property
    def beta(self) -> torch.Tensor:
        return self.beta_raw.clamp(0.0, 1.0)

    def forward(self, stage: DecoderStage, x: torch.Tensor) -> torch.Tensor:
        """Run a decoder stage body with temporal mixing; x is (N, C, H, W)
        holding the whole clip."""
        if x.ndim != 4:
            raise ContractError(f"expected a (N, C, H, W) clip, got {tuple(x.shape)}")
        h = stage.res1(stage.conv(x))
        a = self.alpha.view(1, -1, 1, 1)
        c3 = self.conv3d(h.transpose(0, 1).unsqueeze(0)).squeeze(0).transpose(0, 1)
        h2 = a * c3 + (1.0 - a) * h
        b = self.beta.view(1, -1, 1, 1)
        mixed = b * self.attn(h2) + (1.0 - b) * h2
        return stage.res2(mixed)


class FeatureFusion(nn.Module):
    """Residual encoder-feature fusion scaled by the fidelity weight."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = zero_module(nn.Conv2d(2 * channels, channels, 3, padding=1))

    def forward(self, f_e: torch.Tensor, f_d: torch.Tensor, omega: float) -> torch.Tensor:
        if f_e.shape[-2:] != f_d.shape[-2:]:
            raise ContractError(
                f"encoder/decoder features misaligned: {tuple(f_e.shape)} vs {tuple(f_d.shape)}"
            )
        if omega == 0.0:
            return f_d
        return f_d + omega * self.proj(torch.cat([f_e, f_d], dim=1))
