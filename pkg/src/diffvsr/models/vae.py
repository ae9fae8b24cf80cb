"""Toy frame autoencoder: H x W x 3 pixels <-> (H/4) x (W/4) x d latents.

The decoder is organized as explicit stages (conv3x3 + two residual
blocks, with nearest x2 upsampling between stages) and exposes three hook
points per stage so guidance modules can attach without subclassing:

    pre[i](h)            runs on the stage input (after upsampling)
    body[i](stage, h)    replaces the stage body (conv + res + res)
    post[i](h, enc_feat) runs on the stage output, optionally fusing the
                         matching-resolution encoder feature

Encoding is deterministic at inference (posterior mean); the training
loss adds a lightly weighted KL term on (mean, logvar).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigurationError, ContractError
from .layers import ResBlock, group_norm

LATENT_FACTOR = 4


@dataclass
class DecoderHooks:
    """Per-stage decoder callbacks; keys are stage indices."""

    pre: dict[int, Callable] = field(default_factory=dict)
    body: dict[int, Callable] = field(default_factory=dict)
    post: dict[int, Callable] = field(default_factory=dict)

    def validate(self, num_stages: int) -> None:
        for name, table in (("pre", self.pre), ("body", self.body), ("post", self.post)):
            for idx, fn in table.items():
                if not isinstance(idx, int) or not 0 <= idx < num_stages:
                    raise ConfigurationError(
                        f"{name} hook index {idx!r} outside [0, {num_stages})"
                    )
                if not callable(fn):
                    raise ConfigurationError(f"{name} hook for stage {idx} is not callable")


class FrameEncoder(nn.Module):
    def __init__(self, base_channels: int = 32, latent_channels: int = 4):
        super().__init__()
        c1, c2 = base_channels, base_channels * 2
        self.conv_in = nn.Conv2d(3, c1, 3, padding=1)
        self.res_full = ResBlock(c1)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.res_half = ResBlock(c2)
        self.down2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.res_quarter = ResBlock(c2)
        self.norm_out = group_norm(c2)
        self.to_stats = nn.Conv2d(c2, latent_channels * 2, 3, padding=1)
        self.latent_channels = latent_channels

    def _check(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ContractError(f"encoder expects (B, 3, H, W), got {tuple(x.shape)}")
        if x.shape[2] % LATENT_FACTOR or x.shape[3] % LATENT_FACTOR:
            raise ContractError(
                f"H and W must be divisible by {LATENT_FACTOR}, got {tuple(x.shape[2:])}"
            )

    def features(self, x: torch.Tensor):
        """Multi-scale features keyed by the decoder stage they align with."""
        self._check(x)
        f_full = self.res_full(self.conv_in(x))
        f_half = self.res_half(self.down1(f_full))
        f_quarter = self.res_quarter(self.down2(f_half))
        return f_quarter, {0: f_quarter, 1: f_half, 2: f_full}

    def stats(self, x: torch.Tensor):
        f_quarter, _ = self.features(x)
        stats = self.to_stats(F.silu(self.norm_out(f_quarter)))
        mean, logvar = stats.chunk(2, dim=1)
        return mean, logvar

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic encoding: the posterior mean."""
        return self.stats(x)[0]

    def forward_with_features(self, x: torch.Tensor):
        f_quarter, feats = self.features(x)
        stats = self.to_stats(F.silu(self.norm_out(f_quarter)))
        mean, _ = stats.chunk(2, dim=1)
        return mean, feats


class DecoderStage(nn.Module):
    """conv3x3 followed by two residual blocks, optionally after x2 upsampling."""

    def __init__(self, in_ch: int, out_ch: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.res1 = ResBlock(out_ch)
        self.res2 = ResBlock(out_ch)

    def lift(self, h: torch.Tensor) -> torch.Tensor:
        return F.interpolate(h, scale_factor=2, mode="nearest") if self.upsample else h

    def body(self, h: torch.Tensor) -> torch.Tensor:
        return self.res2(self.res1(self.conv(h)))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.body(self.lift(h))


class FrameDecoder(nn.Module):
    def __init__(self, base_channels: int = 32, latent_channels: int = 4):
        super().__init__()
        c1, c2 = base_channels, base_channels * 2
        self.stages = nn.ModuleList(
            [
                DecoderStage(latent_channels, c2, upsample=False),
                DecoderStage(c2, c2, upsample=True),
                DecoderStage(c2, c1, upsample=True),
            ]
        )
        self.norm_out = group_norm(c1)
        self.conv_out = nn.Conv2d(c1, 3, 3, padding=1)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def stage_channels(self, idx: int) -> int:
        return self.stages[idx].conv.out_channels

    def stage_input_channels(self, idx: int) -> int:
        """Channel count seen by a stage's pre hook (the stage input)."""
        return self.stages[idx].conv.in_channels

    def forward(
        self,
        z: torch.Tensor,
        enc_feats: dict[int, torch.Tensor] | None = None,
        hooks: DecoderHooks | None = None,
    ) -> torch.Tensor:
        if hooks is not None:
            hooks.validate(self.num_stages)
        h = z
        for i, stage in enumerate(self.stages):
            h = stage.lift(h)
            if hooks and i in hooks.pre:
                h = _call_hook(hooks.pre[i], "pre", i, h)
            if hooks and i in hooks.body:
                h = _call_hook(hooks.body[i], "body", i, stage, h)
            else:
                h = stage.body(h)
            if hooks and i in hooks.post:
                enc = enc_feats.get(i) if enc_feats else None
                h = _call_hook(hooks.post[i], "post", i, h, enc)
        return torch.sigmoid(self.conv_out(F.silu(self.norm_out(h))))


def _call_hook(fn, kind, idx, *args):
    try:
        out = fn(*args)
    except TypeError as exc:
        raise ConfigurationError(f"{kind} hook at stage {idx} has a bad signature: {exc}")
    if not isinstance(out, torch.Tensor):
        raise ConfigurationError(f"{kind} hook at stage {idx} must return a tensor")
    return out


class VideoVAE(nn.Module):
    """Encoder/decoder pair with the KL training objective."""

    def __init__(self, base_channels: int = 32, latent_channels: int = 4,
                 kl_weight: float = 1e-6):
        super().__init__()
        self.encoder = FrameEncoder(base_channels, latent_channels)
        self.decoder = FrameDecoder(base_channels, latent_channels)
        self.kl_weight = kl_weight
        self.latent_channels = latent_channels

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def encode_with_features(self, x: torch.Tensor):
        return self.encoder.forward_with_features(x)

    def decode(self, z, enc_feats=None, hooks=None) -> torch.Tensor:
        return self.decoder(z, enc_feats=enc_feats, hooks=hooks)

    def training_loss(self, x: torch.Tensor, generator: torch.Generator | None = None):
        mean, logvar = self.encoder.stats(x)
        logvar = logvar.clamp(-20, 10)
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * logvar) * eps
        recon = self.decode(z)
        rec_loss = F.mse_loss(recon, x)
        kl = -0.5 * torch.mean(1 + logvar - mean.pow(2) - logvar.exp())
        return rec_loss + self.kl_weight * kl, rec_loss
