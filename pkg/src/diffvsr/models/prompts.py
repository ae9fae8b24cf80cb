"""Compression-aware prompt bank with residual injection.

Each hosting decoder level owns an independent bank: K learnable
components plus an auxiliary conv + adaptive-average-pool encoder that
reads a length-K weight vector off the level's feature (no softmax; the
raw pooled responses carry severity information). The weighted component
sum is bilinearly resized to the feature's spatial dims, convolved, mixed
with the feature through a transformer block, and returned through a
zero-initialized conv, so injection is a no-op at initialization.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ContractError
from .layers import TokenBlock, zero_module

PROMPT_INIT_STD = 0.02


class PromptBank(nn.Module):
    def __init__(self, host_channels: int, num_components: int = 5, prompt_hw: int = 8):
        super().__init__()
        if num_components < 1:
            raise ContractError(f"need at least one prompt component, got {num_components}")
        self.host_channels = host_channels
        self.num_components = num_components
        self.components = nn.Parameter(
            PROMPT_INIT_STD * torch.randn(num_components, host_channels, prompt_hw, prompt_hw)
        )
        self.aux = nn.Conv2d(host_channels, num_components, 3, padding=1)
        self.prompt_conv = nn.Conv2d(host_channels, host_channels, 3, padding=1)
        self.mixer = TokenBlock(2 * host_channels)
        self.out_conv = zero_module(nn.Conv2d(2 * host_channels, host_channels, 3, padding=1))

    def weights(self, z: torch.Tensor) -> torch.Tensor:
        """Severity vector v, shape (B, K): AAP(Conv3x3(Z)); no softmax."""
        return F.adaptive_avg_pool2d(self.aux(z), 1).flatten(1)

    def prompt(self, v: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
        """Weighted component sum, resized to target_hw, then convolved."""
        p = torch.einsum("bk,kchw->bchw", v, self.components)
        p = F.interpolate(p, size=target_hw, mode="bilinear", align_corners=False)
        return self.prompt_conv(p)

    def inject(self, z: torch.Tensor, p_c: torch.Tensor) -> torch.Tensor:
        """Conv3x3(TransformerBlock(concat(Z, P_C))), back at Z's channel count."""
        if p_c.shape[-2:] != z.shape[-2:]:
            raise ContractError(
                f"prompt dims {tuple(p_c.shape[-2:])} != feature dims {tuple(z.shape[-2:])}"
            )
        b, c, h, w = z.shape
        mixed = torch.cat([z, p_c], dim=1)
        tokens = mixed.flatten(2).transpose(1, 2)
        tokens = self.mixer(tokens)
        mixed = tokens.transpose(1, 2).reshape(b, 2 * c, h, w)
        return self.out_conv(mixed)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """Host-side residual application: z + injection(z)."""
        v = self.weights(z)
        p_c = self.prompt(v, z.shape[-2:])
        return z + self.inject(z, p_c)
