"""Conditioned noise-prediction UNet plus its trainable control branch.

Three resolutions with widths (32, 64, 128), two residual blocks per
stage, self-attention at the lowest resolution, sinusoidal timestep
conditioning. The control branch is a copy of the encoder taking
concat(noisy latent, guidance latent); its multi-scale outputs pass
through zero-initialized 1x1 convolutions and are added to the skip/mid
features, so a freshly created branch leaves the base model untouched.
"""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ContractError
from .layers import ResBlock, SelfAttention2d, group_norm, timestep_embedding, zero_module


class UNetEncoder(nn.Module):
    def __init__(self, in_channels: int, widths: tuple[int, int, int], temb_dim: int):
        super().__init__()
        c0, c1, c2 = widths
        self.conv_in = nn.Conv2d(in_channels, c0, 3, padding=1)
        self.stage0 = nn.ModuleList([ResBlock(c0, temb_dim=temb_dim),
                                     ResBlock(c0, temb_dim=temb_dim)])
        self.down0 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.stage1 = nn.ModuleList([ResBlock(c1, temb_dim=temb_dim),
                                     ResBlock(c1, temb_dim=temb_dim)])
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.mid1 = ResBlock(c2, temb_dim=temb_dim)
        self.attn = SelfAttention2d(c2)
        self.mid2 = ResBlock(c2, temb_dim=temb_dim)

    def forward(self, x: torch.Tensor, temb: torch.Tensor):
        h = self.conv_in(x)
        for blk in self.stage0:
            h = blk(h, temb)
        f0 = h
        h = self.down0(h)
        for blk in self.stage1:
            h = blk(h, temb)
        f1 = h
        h = self.down1(h)
        h = self.mid2(self.attn(self.mid1(h, temb)), temb)
        return f0, f1, h


class DenoiseUNet(nn.Module):
    def __init__(self, latent_channels: int = 4, widths: tuple[int, int, int] = (32, 64, 128)):
        super().__init__()
        c0, c1, c2 = widths
        self.widths = widths
        self.latent_channels = latent_channels
        self.temb_dim = c2
        self.time_mlp = nn.Sequential(
            nn.Linear(c0, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim)
        )
        self.encoder = UNetEncoder(latent_channels, widths, self.temb_dim)

        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec1 = nn.ModuleList([ResBlock(c1 * 2, c1, temb_dim=self.temb_dim),
                                   ResBlock(c1, temb_dim=self.temb_dim)])
        self.up0 = nn.Conv2d(c1, c0, 3, padding=1)
        self.dec0 = nn.ModuleList([ResBlock(c0 * 2, c0, temb_dim=self.temb_dim),
                                   ResBlock(c0, temb_dim=self.temb_dim)])
        self.norm_out = group_norm(c0)
        self.conv_out = nn.Conv2d(c0, latent_channels, 3, padding=1)

    def time_embedding(self, t, batch: int, device) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.full((batch,), int(t), dtype=torch.long, device=device)
        emb = timestep_embedding(t, self.widths[0])
        return self.time_mlp(emb.to(self.time_mlp[0].weight.dtype))

    def forward(
        self,
        z: torch.Tensor,
        t,
        control: tuple[torch.Tensor, torch.Tensor, torch.Tensor] | None = None,
        prompt_fn: Callable[[int, torch.Tensor], torch.Tensor] | None = None,
    ) -> torch.Tensor:
        """Predict the noise in z at timestep t.

        control: optional zero-projected (full, half, mid) features added to
        the skip and mid paths. prompt_fn(level, h): optional per-decoder-level
        feature transform (level 0 at half res, level 1 at full res).
        """
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ContractError(f"expected (B, {self.latent_channels}, h, w), got {tuple(z.shape)}")
        temb = self.time_embedding(t, z.shape[0], z.device)
        f0, f1, h = self.encoder(z, temb)
        if control is not None:
            c0, c1, cm = control
            for name, a, b in (("full", c0, f0), ("half", c1, f1), ("mid", cm, h)):
                if a.shape != b.shape:
                    raise ContractError(
                        f"control feature {name} shape {tuple(a.shape)} != {tuple(b.shape)}"
                    )
            f0 = f0 + c0
            f1 = f1 + c1
            h = h + cm

        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = torch.cat([h, f1], dim=1)
        for blk in self.dec1:
            h = blk(h, temb)
        if prompt_fn is not None:
            h = prompt_fn(0, h)
        h = self.up0(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = torch.cat([h, f0], dim=1)
        for blk in self.dec0:
            h = blk(h, temb)
        if prompt_fn is not None:
            h = prompt_fn(1, h)
        return self.conv_out(F.silu(self.norm_out(h)))

    def decoder_level_channels(self) -> dict[int, int]:
        return {0: self.widths[1], 1: self.widths[0]}


class ControlBranch(nn.Module):
    """Trainable encoder copy consuming concat(Z_t, guidance latent)."""

    def __init__(self, latent_channels: int = 4, widths: tuple[int, int, int] = (32, 64, 128),
                 temb_dim: int | None = None):
        super().__init__()
        c0, c1, c2 = widths
        self.temb_dim = temb_dim or c2
        self.encoder = UNetEncoder(latent_channels * 2, widths, self.temb_dim)
        self.proj_full = zero_module(nn.Conv2d(c0, c0, 1))
        self.proj_half = zero_module(nn.Conv2d(c1, c1, 1))
        self.proj_mid = zero_module(nn.Conv2d(c2, c2, 1))

    @classmethod
    def from_unet(cls, unet: DenoiseUNet) -> "ControlBranch":
        """Clone the base encoder weights; extra input channels start at zero."""
        branch = cls(unet.latent_channels, unet.widths, unet.temb_dim)
        src = unet.encoder.state_dict()
        dst = branch.encoder.state_dict()
        for key, value in src.items():
            if key == "conv_in.weight":
                dst[key].zero_()
                dst[key][:, : value.shape[1]] = value
            else:
                dst[key].copy_(value)
        branch.encoder.load_state_dict(dst)
        return branch

    def forward(self, z_t: torch.Tensor, guidance_latent: torch.Tensor, temb: torch.Tensor):
        if guidance_latent.shape != z_t.shape:
            raise ContractError(
                f"guidance latent shape {tuple(guidance_latent.shape)} != z shape {tuple(z_t.shape)}"
            )
        f0, f1, mid = self.encoder(torch.cat([z_t, guidance_latent], dim=1), temb)
        return self.proj_full(f0), self.proj_half(f1), self.proj_mid(mid)
