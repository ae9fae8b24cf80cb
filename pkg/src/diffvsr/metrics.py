"""Self-contained quality and temporal-consistency measurements.

All reference metrics operate on the BT.601 luma channel
(Y = 0.299 R + 0.587 G + 0.114 B) of [0, 1] frames. Learned perceptual
metrics need external pretrained models and are reported as unavailable
rather than approximated.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi

from .clips import VideoClip, save_frame_png
from .errors import ContractError
from .flow import estimate_flow
from .warp import warp_numpy

PSNR_CAP = 99.0
UNAVAILABLE_METRICS = ("lpips", "dists", "fid", "niqe", "maniqa", "clip_iqa", "vmaf")


def luma(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.shape[2] == 1:
        return frame[:, :, 0]
    return 0.299 * frame[:, :, 0] + 0.587 * frame[:, :, 1] + 0.114 * frame[:, :, 2]


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ContractError(f"frame dims differ: {a.shape} vs {b.shape}")


def psnr_y(a: np.ndarray, b: np.ndarray) -> float:
    """Luma PSNR with dynamic range 1.0, capped at 99 dB."""
    _check_dims(np.asarray(a), np.asarray(b))
    mse = float(np.mean((luma(a) - luma(b)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def ssim_y(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM on luma: 11x11 Gaussian window (sigma 1.5),
    K1=0.01, K2=0.03, L=1, averaged over fully valid window positions."""
    _check_dims(np.asarray(a), np.asarray(b))
    ya = luma(a)
    yb = luma(b)
    size = 11
    if ya.shape[0] < size or ya.shape[1] < size:
        raise ContractError(f"ssim_y needs at least {size}x{size} inputs, got {ya.shape}")
    g = _gaussian_window(size)

    def win_mean(x):
        full = ndi.correlate1d(ndi.correlate1d(x, g, axis=0, mode="constant"),
                               g, axis=1, mode="constant")
        m = size // 2
        return full[m:-m, m:-m]

    mu_a = win_mean(ya)
    mu_b = win_mean(yb)
    var_a = win_mean(ya * ya) - mu_a**2
    var_b = win_mean(yb * yb) - mu_b**2
    cov = win_mean(ya * yb) - mu_a * mu_b
    c1 = 0.01**2
    c2 = 0.03**2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def warp_error(clip: VideoClip, pyramid_levels: int = 3, iterations: int = 4) -> float:
    """Mean L1 between flow-warped luma frames and their successors."""
    ys = [luma(f)[:, :, None] for f in clip.frames]
    if len(ys) < 2:
        warnings.warn("warp_error on a single-frame clip is 0 by convention")
        return 0.0
    errs = []
    for i in range(len(ys) - 1):
        bwd = estimate_flow(ys[i + 1], ys[i],
                            pyramid_levels=pyramid_levels, iterations=iterations)
        pred = warp_numpy(ys[i], bwd)
        errs.append(float(np.mean(np.abs(pred - ys[i + 1]))))
    return float(np.mean(errs))


def psp_loss(sr: np.ndarray, gt: np.ndarray, window: int = 7) -> float:
    """Perception-sensitive pixel loss: luma L1 weighted by the ground
    truth's local variance map (min-max normalized over the frame). The
    weighted mean is rescaled by the mean weight, so a uniform map reduces
    to plain L1; a degenerate (constant) map falls back to plain L1."""
    _check_dims(np.asarray(sr), np.asarray(gt))
    ys = luma(sr)
    yg = luma(gt)
    mean = ndi.uniform_filter(yg, window, mode="reflect")
    var = ndi.uniform_filter(yg * yg, window, mode="reflect") - mean**2
    var = np.maximum(var, 0.0)
    spread = var.max() - var.min()
    diff = np.abs(ys - yg)
    if spread < 1e-12:
        return float(np.mean(diff))
    w = (var - var.min()) / spread
    return float(np.mean(w * diff) / np.mean(w))


def temporal_profile(clip: VideoClip, row: int) -> np.ndarray:
    """Stack one pixel row from every frame into an (N, W, C) image."""
    if not 0 <= row < clip.height:
        raise ContractError(f"row {row} outside [0, {clip.height})")
    return np.stack([f[row] for f in clip.frames], axis=0)


def write_profile_png(clip: VideoClip, row: int, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_frame_png(temporal_profile(clip, row), path)
    return path


@dataclass
class MetricReport:
    """Per-frame and aggregate values for one predicted clip."""

    clip_id: str = ""
    variant: str = ""
    degradation: dict = field(default_factory=dict)
    psnr_y: list[float] = field(default_factory=list)
    ssim_y: list[float] = field(default_factory=list)
    psp_loss: list[float] = field(default_factory=list)
    warp_error: float = 0.0
    flags: list[str] = field(default_factory=list)
    unavailable: dict = field(
        default_factory=lambda: {name: None for name in UNAVAILABLE_METRICS}
    )

    @property
    def mean_psnr_y(self) -> float:
        return float(np.mean(self.psnr_y)) if self.psnr_y else 0.0

    @property
    def mean_ssim_y(self) -> float:
        return float(np.mean(self.ssim_y)) if self.ssim_y else 0.0

    @property
    def mean_psp_loss(self) -> float:
        return float(np.mean(self.psp_loss)) if self.psp_loss else 0.0

    def summary(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "variant": self.variant,
            "psnr_y": self.mean_psnr_y,
            "ssim_y": self.mean_ssim_y,
            "psp_loss": self.mean_psp_loss,
            "warp_error": self.warp_error,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregates"] = self.summary()
        return d


def evaluate_clip(pred: VideoClip, gt: VideoClip, clip_id: str = "",
                  variant: str = "", degradation: dict | None = None) -> MetricReport:
    if len(pred) != len(gt):
        raise ContractError(f"clip lengths differ: {len(pred)} vs {len(gt)}")
    report = MetricReport(clip_id=clip_id, variant=variant,
                          degradation=degradation or {})
    for p, g in zip(pred.frames, gt.frames):
        report.psnr_y.append(psnr_y(p, g))
        report.ssim_y.append(ssim_y(p, g))
        report.psp_loss.append(psp_loss(p, g))
    if len(pred) >= 2:
        report.warp_error = warp_error(pred)
    else:
        report.warp_error = 0.0
        report.flags.append("single_frame_warp_error")
    return report


def write_report(reports: list[MetricReport], json_path: str | Path) -> tuple[Path, Path]:
    """Write reports as JSON plus a CSV twin next to it."""
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "clips": [r.to_dict() for r in sorted(reports, key=lambda r: r.clip_id)],
        "mean": {
            "psnr_y": float(np.mean([r.mean_psnr_y for r in reports])),
            "ssim_y": float(np.mean([r.mean_ssim_y for r in reports])),
            "psp_loss": float(np.mean([r.mean_psp_loss for r in reports])),
            "warp_error": float(np.mean([r.warp_error for r in reports])),
        },
    }
    json_path.write_text(json.dumps(payload, indent=2))
    csv_path = json_path.with_suffix(".csv")
    lines = ["clip_id,variant,psnr_y,ssim_y,psp_loss,warp_error"]
    for r in sorted(reports, key=lambda r: r.clip_id):
        s = r.summary()
        lines.append(
            f"{s['clip_id']},{s['variant']},{s['psnr_y']:.6f},"
            f"{s['ssim_y']:.6f},{s['psp_loss']:.6f},{s['warp_error']:.6f}"
        )
    csv_path.write_text("\n".join(lines) + "\n")
    return json_path, csv_path
