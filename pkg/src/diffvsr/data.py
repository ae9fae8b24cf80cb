"""Synthetic clip generation and dataset directory handling.

Clips combine a smoothly textured periodic background under global
subpixel translation, an optional rotating textured disc, and an optional
moving occluder rectangle. The background lives on a torus, so
translation never runs out of texture. Everything is derived from one
seed; the same spec always produces bit-identical directories.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .clips import VideoClip
from .errors import ConfigurationError, ContractError


@dataclass
class SyntheticDatasetSpec:
    num_clips: int = 24
    frames_per_clip: int = 5
    resolution: int = 64
    motion: dict = field(default_factory=lambda: {"translate": True, "rotate": True,
                                                  "occluders": True})
    texture_seed: int = 0
    max_shift: float = 2.0

    def __post_init__(self):
        if self.frames_per_clip < 2:
            raise ContractError("frames_per_clip must be >= 2 for temporal tests")
        if self.resolution % 4:
            raise ContractError("resolution must be divisible by 4")


def _periodic_texture(rng: np.random.Generator, size: int, cutoff: float = 0.12) -> np.ndarray:
    """Smooth random RGB texture that tiles seamlessly."""
    noise = rng.standard_normal((size, size, 3))
    fx = np.fft.fftfreq(size)[:, None]
    fy = np.fft.fftfreq(size)[None, :]
    keep = (np.sqrt(fx**2 + fy**2) <= cutoff)[:, :, None]
    spectrum = np.fft.fft2(noise, axes=(0, 1)) * keep
    tex = np.fft.ifft2(spectrum, axes=(0, 1)).real
    lo, hi = tex.min(), tex.max()
    return 0.1 + 0.8 * (tex - lo) / (hi - lo)


def _sample_torus(tex: np.ndarray, shift_x: float, shift_y: float) -> np.ndarray:
    """Bilinear sample of a periodic texture translated by a subpixel shift."""
    size = tex.shape[0]
    ys = (np.arange(size) - shift_y) % size
    xs = (np.arange(size) - shift_x) % size
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    y1 = (y0 + 1) % size
    x1 = (x0 + 1) % size
    top = (1 - fx) * tex[np.ix_(y0, x0)] + fx * tex[np.ix_(y0, x1)]
    bot = (1 - fx) * tex[np.ix_(y1, x0)] + fx * tex[np.ix_(y1, x1)]
    return (1 - fy) * top + fy * bot


def _rotated_disc(patch: np.ndarray, angle: float) -> tuple[np.ndarray, np.ndarray]:
    """Rotate a square texture patch; returns (pixels, disc mask)."""
    size = patch.shape[0]
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xx - c
    dy = yy - c
    sx = c + np.cos(-angle) * dx - np.sin(-angle) * dy
    sy = c + np.sin(-angle) * dx + np.cos(-angle) * dy
    x0 = np.clip(np.floor(sx).astype(int), 0, size - 2)
    y0 = np.clip(np.floor(sy).astype(int), 0, size - 2)
    fx = np.clip(sx - x0, 0, 1)[:, :, None]
    fy = np.clip(sy - y0, 0, 1)[:, :, None]
    top = (1 - fx) * patch[y0, x0] + fx * patch[y0, x0 + 1]
    bot = (1 - fx) * patch[y0 + 1, x0] + fx * patch[y0 + 1, x0 + 1]
    pixels = (1 - fy) * top + fy * bot
    mask = (dx**2 + dy**2) <= (c - 1) ** 2
    return pixels, mask


def synth_clip(spec: SyntheticDatasetSpec, clip_index: int) -> tuple[VideoClip, dict]:
    """Render one clip plus its motion metadata."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.texture_seed, clip_index]))
    res = spec.resolution
    tex = _periodic_texture(rng, res)
    motion = spec.motion or {}
    meta: dict = {"id": f"clip_{clip_index:04d}"}

    if motion.get("translate", True):
        velocity = rng.uniform(-spec.max_shift, spec.max_shift, size=2)
    else:
        velocity = np.zeros(2)
    meta["translation"] = [float(velocity[0]), float(velocity[1])]

    rotator = None
    if motion.get("rotate", True):
        psize = res // 4
        patch = _periodic_texture(rng, psize, cutoff=0.3)
        omega = rng.uniform(-0.3, 0.3)
        cx = int(rng.integers(psize, res - 2 * psize))
        cy = int(rng.integers(psize, res - 2 * psize))
        rotator = (patch, omega, cx, cy)
        meta["rotator"] = {"omega": float(omega), "pos": [cx, cy]}

    occluder = None
    if motion.get("occluders", True):
        osize = res // 8
        color = rng.uniform(0.1, 0.9, size=3)
        start = rng.uniform(osize, res - 2 * osize, size=2)
        vel = rng.uniform(-2.0, 2.0, size=2)
        occluder = (osize, color, start, vel)
        meta["occluder"] = {"size": osize, "velocity": [float(vel[0]), float(vel[1])]}

    frames = []
    for i in range(spec.frames_per_clip):
        frame = _sample_torus(tex, velocity[0] * i, velocity[1] * i)
        if rotator is not None:
            patch, omega, cx, cy = rotator
            pixels, mask = _rotated_disc(patch, omega * i)
            region = frame[cy : cy + patch.shape[0], cx : cx + patch.shape[1]]
            region[mask] = pixels[mask]
        if occluder is not None:
            osize, color, start, vel = occluder
            px = int(round(start[0] + vel[0] * i))
            py = int(round(start[1] + vel[1] * i))
            px = max(0, min(res - osize, px))
            py = max(0, min(res - osize, py))
            frame[py : py + osize, px : px + osize] = color
        frames.append(np.clip(frame, 0.0, 1.0))
    return VideoClip(frames=frames), meta


def synth_dataset(spec: SyntheticDatasetSpec, out_dir: str | Path, force: bool = False) -> Path:
    """Write HR clips as frame directories plus a manifest.json."""
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if manifest_path.exists() and not force:
        raise ConfigurationError(f"{manifest_path} exists; pass force=True to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    clips_meta = []
    for i in range(spec.num_clips):
        clip, meta = synth_clip(spec, i)
        clip.save_dir(out_dir / meta["id"])
        clips_meta.append(meta)
    manifest = {"spec": asdict(spec), "clips": clips_meta}
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return out_dir


def load_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise ConfigurationError(f"no manifest.json under {root}")
    return json.loads(path.read_text())


def dataset_clips(root: str | Path) -> list[tuple[str, Path]]:
    manifest = load_manifest(root)
    return [(meta["id"], Path(root) / meta["id"]) for meta in manifest["clips"]]


def split_clips(root: str | Path, holdout: int) -> tuple[list[tuple[str, Path]], list[tuple[str, Path]]]:
    """Deterministic train/held-out split: the last ``holdout`` clips."""
    clips = dataset_clips(root)
    if holdout >= len(clips):
        raise ConfigurationError(
            f"holdout {holdout} must be smaller than the clip count {len(clips)}"
        )
    if holdout == 0:
        return clips, []
    return clips[:-holdout], clips[-holdout:]
