"""Transformer pre-cleaner: upsamples and denoises LQ frames before they
become diffusion guidance.

shallow conv -> N residual window-attention blocks (two layers each,
regular + shifted windows) -> conv + PixelShuffle upsampling. Inputs are
padded to window multiples with replicate padding and the output is
cropped back, so callers never see the padding. Each block scales its
body by a (non-trained) res_scale buffer; forcing all scales to zero
reduces the network to conv + pixel-shuffle of the shallow feature.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ContractError


def pad_frame_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, int, int]:
    """Replicate-pad a (B, C, H, W) tensor on the bottom/right to a multiple."""
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, h, w


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def window_reverse(win: torch.Tensor, ws: int, h: int, w: int) -> torch.Tensor:
    b = win.shape[0] // (h * w // ws // ws)
    x = win.view(b, h // ws, w // ws, ws, ws, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


def shift_attn_mask(h: int, w: int, ws: int, shift: int, device) -> torch.Tensor:
    """Mask preventing attention across wrapped borders of shifted windows."""
    img = torch.zeros(1, h, w, 1, device=device)
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for vs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            img[:, hs, vs, :] = cnt
            cnt += 1
    win = window_partition(img, ws).squeeze(-1)
    diff = win.unsqueeze(1) - win.unsqueeze(2)
    return torch.where(diff == 0, 0.0, float("-inf"))


class WindowAttention(nn.Module):
    def __init__(self, dim: int, window: int, heads: int = 2):
        super().__init__()
        self.dim = dim
        self.window = window
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        coords = torch.stack(torch.meshgrid(
            torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :]
        rel = rel.permute(1, 2, 0) + window - 1
        self.register_buffer("rel_index", (rel[..., 0] * (2 * window - 1) + rel[..., 1]),
                             persistent=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        bn, n, c = x.shape
        qkv = self.qkv(x).reshape(bn, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        bias = self.rel_bias[self.rel_index.view(-1)].view(n, n, self.heads)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            attn = attn + mask.unsqueeze(1)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bn, n, c)
        return self.proj(out)


class SwinLayer(nn.Module):
    def __init__(self, dim: int, window: int, shift: int, heads: int = 2, mlp_ratio: float = 2.0):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, H, W, C) with H, W multiples of the window size
        b, h, w, c = x.shape
        shortcut = x
        x = self.norm1(x)
        mask = None
        if self.shift:
            x = torch.roll(x, (-self.shift, -self.shift), dims=(1, 2))
            # one mask per window position, tiled over the batch
            mask = shift_attn_mask(h, w, self.window, self.shift, x.device).repeat(b, 1, 1)
        win = window_partition(x, self.window)
        win = self.attn(win, mask)
        x = window_reverse(win, self.window, h, w)
        if self.shift:
            x = torch.roll(x, (self.shift, self.shift), dims=(1, 2))
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class ResidualWindowBlock(nn.Module):
    """Two Swin layers (regular + shifted) and a conv, wrapped in a scaled
    residual connection."""

    def __init__(self, dim: int, window: int, heads: int = 2):
        super().__init__()
        self.layers = nn.ModuleList([
            SwinLayer(dim, window, shift=0, heads=heads),
            SwinLayer(dim, window, shift=window // 2, heads=heads),
        ])
        self.conv = nn.Conv2d(dim, dim, 3, padding=1)
        self.register_buffer("res_scale", torch.ones(()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x.permute(0, 2, 3, 1)
        for layer in self.layers:
            h = layer(h)
        h = self.conv(h.permute(0, 3, 1, 2))
        return x + self.res_scale * h


class PreCleaner(nn.Module):
    def __init__(self, num_blocks: int = 6, window: int = 8, channels: int = 32,
                 upscale: int = 4, heads: int = 2):
        super().__init__()
        if num_blocks < 1:
            raise ContractError(f"num_blocks must be >= 1, got {num_blocks}")
        self.window = window
        self.upscale = upscale
        self.conv_shallow = nn.Conv2d(3, channels, 3, padding=1)
        self.blocks = nn.ModuleList(
            [ResidualWindowBlock(channels, window, heads) for _ in range(num_blocks)]
        )
        self.conv_up = nn.Conv2d(channels, 3 * upscale * upscale, 3, padding=1)
        self.shuffle = nn.PixelShuffle(upscale)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [0, 1] -> (B, 3, upscale*H, upscale*W), unclamped."""
        x, h, w = pad_frame_to_multiple(x, self.window)
        feat = self.conv_shallow(x)
        for block in self.blocks:
            feat = block(feat)
        out = self.shuffle(self.conv_up(feat))
        return out[:, :, : h * self.upscale, : w * self.upscale]

    def enhance(self, x: torch.Tensor) -> torch.Tensor:
        """Contract form of forward: output clamped to [0, 1]."""
        return self.forward(x).clamp(0.0, 1.0)
