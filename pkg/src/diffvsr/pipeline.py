"""End-to-end orchestration: model bundle, full inference, ablation matrix.

Inference realizes the whole restoration chain: per-frame pre-cleaning
(or bicubic upsampling when disabled) -> guidance encoding -> control-
conditioned spaced deterministic sampling over a Gaussian-initialized
latent clip, with prompt injection at the denoiser's decoder levels and
flow-gradient correction per step -> frame decoding with prompt banks,
temporal fusion and encoder-feature fusion -> color correction against
the upsampled input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .clips import VideoClip
from .color import color_correct
from .config import PipelineConfig
from .checkpoint import load_checkpoint, restore_modules
from .diffusion import NoiseSchedule, build_schedule, predict_x0, sampling_timesteps
from .errors import ContractError
from .flow import FlowPair, clip_flows
from .guidance import GuidanceState, guided_step
from .metrics import MetricReport, evaluate_clip
from .models import (
    ControlBranch,
    DecoderHooks,
    DenoiseUNet,
    FeatureFusion,
    PreCleaner,
    PromptBank,
    TemporalFusion,
    VideoVAE,
)
from .resize import resize_bicubic

# decoder stage where encoder features are fused back in
FUSION_STAGE = 1


class PipelineModel(nn.Module):
    """Every trainable piece of the pipeline under one roof."""

    def __init__(self, config: PipelineConfig):
        super().__init__()
        self.config = config
        self.vae = VideoVAE(config.vae.base_channels, config.vae.latent_channels,
                            config.vae.kl_weight)
        self.unet = DenoiseUNet(config.vae.latent_channels, config.unet.widths)
        self.control = ControlBranch(config.vae.latent_channels, config.unet.widths)
        self.precleaner = PreCleaner(config.dcm.blocks, config.dcm.window,
                                     config.dcm.channels, upscale=config.degradation.scale)
        unet_ch = self.unet.decoder_level_channels()
        self.unet_prompts = nn.ModuleDict({
            str(l): PromptBank(unet_ch[l], config.capm.K, config.capm.prompt_hw)
            for l in config.capm.levels.get("unet", [])
        })
        self.vae_prompts = nn.ModuleDict({
            str(l): PromptBank(self.vae.decoder.stage_input_channels(l),
                               config.capm.K, config.capm.prompt_hw)
            for l in config.capm.levels.get("vae", [])
        })
        self.temporal = nn.ModuleDict({
            str(l): TemporalFusion(self.vae.decoder.stage_channels(l))
            for l in config.stam.levels
        })
        self.feature_fusion = FeatureFusion(self.vae.decoder.stage_channels(FUSION_STAGE))
        # scale applied to raw VAE latents before diffusion (set in training)
        self.register_buffer("latent_scale", torch.ones(()))

    def module_groups(self) -> dict[str, nn.Module]:
        return {
            "vae": self.vae,
            "unet": self.unet,
            "control": self.control,
            "precleaner": self.precleaner,
            "unet_prompts": self.unet_prompts,
            "vae_prompts": self.vae_prompts,
            "temporal": self.temporal,
            "feature_fusion": self.feature_fusion,
        }

    def build_schedule(self) -> NoiseSchedule:
        s = self.config.schedule
        return build_schedule(s.steps_total, s.beta_start, s.beta_end)

    def unet_prompt_fn(self):
        banks = self.unet_prompts

        def apply(level: int, h: torch.Tensor) -> torch.Tensor:
            key = str(level)
            return banks[key](h) if key in banks else h

        return apply

    def decoder_hooks(self, enable_capm: bool, enable_stam: bool, omega: float) -> DecoderHooks:
        hooks = DecoderHooks()
        if enable_capm:
            for level, bank in self.vae_prompts.items():
                hooks.pre[int(level)] = bank
        if enable_stam:
            for level, fusion in self.temporal.items():
                hooks.body[int(level)] = fusion
        hooks.post[FUSION_STAGE] = lambda h, enc: (
            h if enc is None else self.feature_fusion(enc, h, omega)
        )
        return hooks


def _frames_to_tensor(clip: VideoClip) -> torch.Tensor:
    arr = clip.as_array().transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).float()


def _tensor_to_frames(t: torch.Tensor) -> VideoClip:
    arr = t.detach().clamp(0, 1).numpy().transpose(0, 2, 3, 1).astype(np.float64)
    return VideoClip.from_array(arr)


def bicubic_up_clip(clip: VideoClip, factor: int) -> VideoClip:
    frames = [np.clip(resize_bicubic(f, f.shape[0] * factor, f.shape[1] * factor), 0, 1)
              for f in clip.frames]
    return VideoClip(frames=frames)


@dataclass
class InferenceResult:
    sr_clip: VideoClip
    report: MetricReport | None
    energies: list[float]


def prepare_guidance(model: PipelineModel, lq_clip: VideoClip, enable_dcm: bool):
    """Pre-clean (or bicubic-up) the LQ frames and encode them as guidance."""
    scale = model.config.degradation.scale
    lq = _frames_to_tensor(lq_clip)
    if enable_dcm:
        with torch.no_grad():
            x_hr = model.precleaner.enhance(lq)
    else:
        x_hr = _frames_to_tensor(bicubic_up_clip(lq_clip, scale))
    with torch.no_grad():
        c_hr, enc_feats = model.vae.encode_with_features(x_hr)
    return x_hr, c_hr, enc_feats


def run_inference(
    model: PipelineModel,
    lq_clip: VideoClip,
    seed: int = 0,
    gt_clip: VideoClip | None = None,
    variants: dict | None = None,
    clip_id: str = "",
) -> InferenceResult:
    config = model.config.with_variants(**(variants or {}))
    sched = model.build_schedule()
    ts = sampling_timesteps(sched.T, config.schedule.sampling_steps)

    x_hr, c_hr, enc_feats = prepare_guidance(model, lq_clip, config.enable_dcm)
    c_hr_scaled = c_hr * model.latent_scale
    n = len(lq_clip)

    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(c_hr.shape, generator=gen)

    prompt_fn = model.unet_prompt_fn() if config.enable_capm else None

    def eps_fn(z_t: torch.Tensor, t: int) -> torch.Tensor:
        temb = model.unet.time_embedding(t, z_t.shape[0], z_t.device)
        control = model.control(z_t, c_hr_scaled, temb)
        return model.unet(z_t, t, control=control, prompt_fn=prompt_fn)

    guide = GuidanceState(enabled=config.enable_guidance and n > 1,
                          lam=config.guidance.lam,
                          normalize=config.guidance.normalize)
    energies: list[float] = []
    flows: FlowPair | None = None
    with torch.no_grad():
        static_flows_done = False
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            eps_hat = eps_fn(z, t)
            if guide.enabled and (config.guidance.recompute_flows or not static_flows_done):
                flows = _latent_flows(model, z, t, sched, eps_hat, config)
                static_flows_done = True
            z = guided_step(z, t, sched, flows, guide,
                            lambda z_t, t_: eps_hat, t_prev=t_prev)
            energies.append(guide.energy)

    z_raw = z / model.latent_scale
    hooks = model.decoder_hooks(config.enable_capm, config.enable_stam, config.fusion.omega)
    with torch.no_grad():
        decoded = model.vae.decode(z_raw, enc_feats=enc_feats, hooks=hooks)
    sr = _tensor_to_frames(decoded)

    if config.enable_color_correct:
        ref = bicubic_up_clip(lq_clip, config.degradation.scale)
        sr = VideoClip(frames=[color_correct(s, r) for s, r in zip(sr.frames, ref.frames)])

    report = None
    if gt_clip is not None:
        report = evaluate_clip(sr, gt_clip, clip_id=clip_id,
                               degradation={"quality": config.degradation.quality,
                                            "scale": config.degradation.scale})
    return InferenceResult(sr_clip=sr, report=report, energies=energies)


def _latent_flows(model, z, t, sched, eps_hat, config) -> FlowPair | None:
    """Flows for guidance, estimated on current denoised estimates decoded to
    pixels and brought back down to latent resolution."""
    x0_latent = predict_x0(z, t, eps_hat, sched) / model.latent_scale
    frames = model.vae.decode(x0_latent).numpy().transpose(0, 2, 3, 1)
    h, w = z.shape[-2:]
    small = [resize_bicubic(f, h, w) for f in frames]
    return clip_flows(small, pyramid_levels=config.flow.pyramid_levels,
                      iterations=config.flow.iterations)


def load_pipeline(ckpt_path, config: PipelineConfig | None = None) -> PipelineModel:
    """Rebuild a pipeline from a checkpoint; config defaults to the stored one."""
    payload = load_checkpoint(ckpt_path, config)
    stored = PipelineConfig.from_dict(payload["manifest"]["config"])
    if config is None:
        config = stored
    model = PipelineModel(config)
    restore_modules(payload, model.module_groups())
    if "latent_scale" in payload["manifest"]["extra"]:
        model.latent_scale.fill_(payload["manifest"]["extra"]["latent_scale"])
    model.eval()
    return model


ABLATION_VARIANTS: dict[str, dict] = {
    "full": {},
    "no_dcm": {"enable_dcm": False},
    "no_capm": {"enable_capm": False},
    "no_stam": {"enable_stam": False},
    "no_guidance": {"enable_guidance": False},
    "no_temporal": {"enable_stam": False, "enable_guidance": False},
    "baseline": {"enable_dcm": False, "enable_capm": False, "enable_stam": False,
                 "enable_guidance": False, "enable_color_correct": False},
}


def run_ablation(
    model: PipelineModel,
    eval_clips: list[tuple[str, VideoClip, VideoClip]],
    seed: int = 0,
    variants: dict[str, dict] | None = None,
) -> dict[str, dict]:
    """Run the switch matrix over (id, lq, gt) clips; returns mean metrics
    per variant."""
    variants = variants or ABLATION_VARIANTS
    table: dict[str, dict] = {}
    for name, switches in variants.items():
        reports = []
        for clip_id, lq, gt in eval_clips:
            res = run_inference(model, lq, seed=seed, gt_clip=gt,
                                variants=switches, clip_id=clip_id)
            reports.append(res.report)
        table[name] = {
            "psnr_y": float(np.mean([r.mean_psnr_y for r in reports])),
            "ssim_y": float(np.mean([r.mean_ssim_y for r in reports])),
            "psp_loss": float(np.mean([r.mean_psp_loss for r in reports])),
            "warp_error": float(np.mean([r.warp_error for r in reports])),
        }
    return table
