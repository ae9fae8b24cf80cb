"""Pixel- and latent-space clip containers plus PNG frame-directory IO.

A video clip is an ordered list of H x W x C float arrays with values in
[0, 1]. Frame directories hold 8-bit PNGs named ``frame_00001.png``,
``frame_00002.png``, ... in ascending order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError

_FRAME_RE = re.compile(r"frame_(\d+)\.png$")


@dataclass
class VideoClip:
    """Ordered frame sequence, each frame H x W x C in [0, 1]."""

    frames: list[np.ndarray]
    frame_rate: float | None = None

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ContractError("a clip needs at least one frame")
        clean = []
        for i, f in enumerate(self.frames):
            f = np.asarray(f, dtype=np.float64)
            if f.ndim == 2:
                f = f[:, :, None]
            if clean and f.shape != clean[0].shape:
                raise ContractError(
                    f"frame {i} shape {f.shape} differs from {clean[0].shape}"
                )
            clean.append(np.clip(f, 0.0, 1.0))
        self.frames = clean

    def __len__(self):
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].shape[0]

    @property
    def width(self) -> int:
        return self.frames[0].shape[1]

    @property
    def channels(self) -> int:
        return self.frames[0].shape[2]

    def as_array(self) -> np.ndarray:
        """Stack frames into an (N, H, W, C) array."""
        return np.stack(self.frames, axis=0)

    @classmethod
    def from_array(cls, arr: np.ndarray, frame_rate: float | None = None) -> "VideoClip":
        return cls(frames=[arr[i] for i in range(arr.shape[0])], frame_rate=frame_rate)

    def save_dir(self, path: str | Path) -> Path:
        """Write frames as 8-bit PNGs frame_00001.png ... into ``path``."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(self.frames, start=1):
            save_frame_png(frame, path / f"frame_{i:05d}.png")
        return path

    @classmethod
    def from_dir(cls, path: str | Path) -> "VideoClip":
        path = Path(path)
        entries = []
        for p in path.iterdir():
            m = _FRAME_RE.search(p.name)
            if m:
                entries.append((int(m.group(1)), p))
        if not entries:
            raise ContractError(f"no frame_*.png files in {path}")
        entries.sort()
        return cls(frames=[load_frame_png(p) for _, p in entries])


@dataclass
class LatentClip:
    """Sequence of h x w x d latent arrays with the pixel dims they came from."""

    latents: list[np.ndarray]
    origin_dims: tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        if len(self.latents) < 1:
            raise ContractError("a latent clip needs at least one frame")
        shape = self.latents[0].shape
        for i, z in enumerate(self.latents):
            if z.shape != shape:
                raise ContractError(f"latent {i} shape {z.shape} differs from {shape}")

    def __len__(self):
        return len(self.latents)


def save_frame_png(frame: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    if u8.shape[2] == 1:
        img = Image.fromarray(u8[:, :, 0], mode="L")
    else:
        img = Image.fromarray(u8, mode="RGB")
    img.save(path)


def load_frame_png(path: str | Path) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr
