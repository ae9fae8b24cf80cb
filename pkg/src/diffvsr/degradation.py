"""Low-quality input synthesis: x4 bicubic decimation plus a DCT codec stand-in.

The compressor mimics constant-rate-factor semantics on a [0, 51] quality
scale: per frame RGB -> YCbCr, blockwise orthonormal DCT, uniform
quantization with AC step

    step(q) = (1/255) * 2^(q / 6)

(the "+6 halves the rate" convention), chroma quantized 1.5x coarser than
luma. The DC coefficient always uses a fixed fine step so flat regions
survive any quality, and quality 0 bypasses quantization entirely
(lossless, matching rate-factor 0). Frames are processed independently;
there is no inter-frame coding.
"""

from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft

from .clips import VideoClip
from .errors import ContractError, ParameterError
from .resize import downscale

# AC quantizer step at quality 0; doubles every 6 quality points.
BASE_AC_STEP = 1.0 / 255.0
# DC step is quality-independent so constant blocks round-trip within 1/255.
DC_STEP = 1.0 / 1024.0
CHROMA_FACTOR = 1.5

# Full-range BT.601 RGB <-> YCbCr.
_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ],
    dtype=np.float64,
)
_YCC2RGB = np.linalg.inv(_RGB2YCC)


@dataclass(frozen=True)
class DegradationSpec:
    """Down-sampling factor plus codec severity (0 lossless .. 51 worst)."""

    scale: int = 4
    quality: int = 25
    block: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.scale < 1:
            raise ParameterError(f"scale must be >= 1, got {self.scale}")
        if not 0 <= self.quality <= 51:
            raise ParameterError(f"quality must lie in [0, 51], got {self.quality}")
        if self.block not in (4, 8, 16):
            raise ParameterError(f"block must be one of 4, 8, 16, got {self.block}")


def ac_step(quality: int) -> float:
    return BASE_AC_STEP * 2.0 ** (quality / 6.0)


def downsample(clip: VideoClip, factor: int) -> VideoClip:
    """Bicubic decimation of every frame by an integer factor."""
    if factor == 1:
        return VideoClip(frames=[f.copy() for f in clip.frames], frame_rate=clip.frame_rate)
    frames = [np.clip(downscale(f, factor), 0.0, 1.0) for f in clip.frames]
    return VideoClip(frames=frames, frame_rate=clip.frame_rate)


def rgb_to_ycbcr(frame: np.ndarray) -> np.ndarray:
    ycc = frame @ _RGB2YCC.T
    ycc[:, :, 1:] += 0.5
    return ycc


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    ycc = ycc.copy()
    ycc[:, :, 1:] -= 0.5
    return ycc @ _YCC2RGB.T


def _pad_to_block(plane: np.ndarray, block: int) -> np.ndarray:
    h, w = plane.shape
    ph = (-h) % block
    pw = (-w) % block
    if ph or pw:
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    return plane


def _quantize_plane(plane: np.ndarray, block: int, step_ac: float, step_dc: float) -> np.ndarray:
    h, w = plane.shape
    padded = _pad_to_block(plane, block)
    hp, wp = padded.shape
    blocks = padded.reshape(hp // block, block, wp // block, block)
    coef = scipy.fft.dctn(blocks, axes=(1, 3), norm="ortho")
    steps = np.full((block, block), step_ac)
    steps[0, 0] = step_dc
    steps = steps[None, :, None, :]
    coef = np.round(coef / steps) * steps
    rec = scipy.fft.idctn(coef, axes=(1, 3), norm="ortho")
    return rec.reshape(hp, wp)[:h, :w]


def compress_frame(frame: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    if spec.quality == 0:
        return np.clip(frame, 0.0, 1.0)
    step = ac_step(spec.quality)
    if frame.shape[2] == 3:
        ycc = rgb_to_ycbcr(frame)
        planes = [
            _quantize_plane(ycc[:, :, 0], spec.block, step, DC_STEP),
            _quantize_plane(ycc[:, :, 1], spec.block, step * CHROMA_FACTOR, DC_STEP),
            _quantize_plane(ycc[:, :, 2], spec.block, step * CHROMA_FACTOR, DC_STEP),
        ]
        out = ycbcr_to_rgb(np.stack(planes, axis=2))
    else:
        out = np.stack(
            [_quantize_plane(frame[:, :, c], spec.block, step, DC_STEP)
             for c in range(frame.shape[2])],
            axis=2,
        )
    return np.clip(out, 0.0, 1.0)


def compress_sim(clip: VideoClip, spec: DegradationSpec) -> VideoClip:
    """Apply the blockwise DCT quantizer to every frame."""
    frames = [compress_frame(f, spec) for f in clip.frames]
    return VideoClip(frames=frames, frame_rate=clip.frame_rate)


def degrade(clip: VideoClip, spec: DegradationSpec) -> VideoClip:
    """Canonical LQ generator: downsample by spec.scale, then compress."""
    return compress_sim(downsample(clip, spec.scale), spec)


def degrade_external(in_dir: str | Path, out_dir: str | Path, command_template: str) -> Path:
    """Escape hatch: run a real encoder via a shell command template.

    The template receives {in} and {out} directories of PNG frames, e.g.
    ``"myencoder --crf 25 {in} {out}"``. Not exercised by the test suite.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cmd = command_template.format(**{"in": shlex.quote(str(in_dir)), "out": shlex.quote(str(out_dir))})
    subprocess.run(cmd, shell=True, check=True)
    return out_dir


def degrade_dir(in_dir: str | Path, out_dir: str | Path, spec: DegradationSpec,
                external_encoder: str | None = None) -> Path:
    """Directory form of degrade() used by the CLI/service."""
    if external_encoder is not None:
        return degrade_external(in_dir, out_dir, external_encoder)
    clip = VideoClip.from_dir(in_dir)
    return degrade(clip, spec).save_dir(out_dir)
