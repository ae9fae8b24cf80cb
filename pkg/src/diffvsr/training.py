"""Staged training: VAE pretrain, denoiser pretrain, pre-cleaner warmup,
then joint fine-tuning with the base encoders frozen.

No pretrained backbone is imported, so stages 1-2 manufacture the prior
the joint stage fine-tunes. One master seed fans out into per-stage numpy
and torch generators whose states ride along in every checkpoint, making
resumed runs reproduce the uninterrupted loss sequence exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, restore_modules, save_checkpoint
from .clips import VideoClip
from .config import PipelineConfig
from .data import split_clips
from .degradation import DegradationSpec, degrade
from .diffusion import noise_loss, q_sample
from .errors import ConfigurationError, TrainingError
from .models.layers import set_trainable
from .pipeline import FUSION_STAGE, PipelineModel, _frames_to_tensor, bicubic_up_clip

STAGES = ("vae", "diffusion", "dcm", "joint")


@dataclass
class TrainResult:
    checkpoint: Path
    history_csv: Path
    final_loss: float
    global_step: int
    stage_losses: dict


class ClipStore:
    """In-memory training clips with quality-on-demand degraded versions."""

    def __init__(self, clips: list[tuple[str, Path]], scale: int, block: int):
        self.ids = []
        self.hr: dict[str, VideoClip] = {}
        self.scale = scale
        self.block = block
        self._lq_cache: dict[tuple[str, int], VideoClip] = {}
        for clip_id, path in clips:
            self.ids.append(clip_id)
            self.hr[clip_id] = VideoClip.from_dir(path)
        if not self.ids:
            raise ConfigurationError("no training clips found")

    def lq(self, clip_id: str, quality: int) -> VideoClip:
        key = (clip_id, quality)
        if key not in self._lq_cache:
            spec = DegradationSpec(scale=self.scale, quality=quality, block=self.block)
            self._lq_cache[key] = degrade(self.hr[clip_id], spec)
        return self._lq_cache[key]


def stage_plan(config: PipelineConfig) -> list[tuple[str, int]]:
    t = config.training
    return [
        ("vae", t.vae_steps),
        ("diffusion", t.diffusion_steps),
        ("dcm", config.dcm.pretrain_steps),
        ("joint", t.joint_steps),
    ]


def configure_stage(model: PipelineModel, stage: str) -> list[torch.nn.Parameter]:
    """Freeze/thaw parameter groups for a stage; returns the trainable list."""
    set_trainable(model, False)
    if stage == "vae":
        set_trainable(model.vae, True)
    elif stage == "diffusion":
        set_trainable(model.unet, True)
    elif stage == "dcm":
        set_trainable(model.precleaner, True)
    elif stage == "joint":
        for mod in (model.control, model.precleaner, model.unet_prompts,
                    model.vae_prompts, model.temporal, model.feature_fusion,
                    model.vae.decoder):
            set_trainable(mod, True)
        # denoiser decoder only; encoder, attention-mid and time MLP stay put
        for mod in (model.unet.up1, model.unet.dec1, model.unet.up0,
                    model.unet.dec0, model.unet.norm_out, model.unet.conv_out):
            set_trainable(mod, True)
    else:
        raise ConfigurationError(f"unknown stage {stage!r}")
    return [p for p in model.parameters() if p.requires_grad]


def frozen_groups(stage: str) -> list[str]:
    if stage == "joint":
        return ["vae.encoder", "unet.encoder", "unet.time_mlp"]
    return []


def stage_lr(config: PipelineConfig, stage: str) -> float:
    return float(config.training.stage_lr.get(stage, config.training.lr))


class _StageRng:
    """Paired numpy/torch generators with exact state capture."""

    def __init__(self, seed: int):
        self.np = np.random.default_rng(seed)
        self.torch = torch.Generator().manual_seed(seed)

    def state(self) -> dict:
        return {"np": self.np.bit_generator.state, "torch": self.torch.get_state()}

    def restore(self, state: dict) -> None:
        self.np.bit_generator.state = state["np"]
        self.torch.set_state(state["torch"])


def _stage_seed(master: int, stage: str) -> int:
    return int(np.random.SeedSequence([master, STAGES.index(stage)]).generate_state(1)[0])


def run_training(
    config: PipelineConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
    max_total_steps: int | None = None,
    only_stage: str | None = None,
) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history_path = out_dir / "history.csv"
    ckpt_path = out_dir / "checkpoint.pt"

    train_clips, _ = split_clips(config.dataset.root, config.dataset.holdout)
    store = ClipStore(train_clips, config.degradation.scale, config.degradation.block)

    model = PipelineModel(config)
    sched = model.build_schedule()

    plan = stage_plan(config)
    if only_stage is not None:
        if only_stage not in STAGES:
            raise ConfigurationError(f"unknown stage {only_stage!r}")
        plan = [(s, n) for s, n in plan if s == only_stage]

    start_stage_idx = 0
    start_step = 0
    global_step = 0
    rng_restore = None
    optimizer_state = None
    history_rows: list[tuple] = []
    stage_losses: dict[str, float] = {}

    if resume is not None:
        payload = load_checkpoint(resume, config)
        restore_modules(payload, model.module_groups())
        manifest = payload["manifest"]
        model.latent_scale.fill_(manifest["extra"].get("latent_scale", 1.0))
        stage_losses = dict(manifest["extra"].get("stage_losses", {}))
        resumed_stage = manifest["stage"]
        matches = [i for i, (s, _) in enumerate(plan) if s == resumed_stage]
        if not matches:
            raise ConfigurationError(
                f"checkpoint stage {resumed_stage!r} not in the requested plan"
            )
        start_stage_idx = matches[0]
        start_step = manifest["step_in_stage"]
        global_step = manifest["global_step"]
        rng_restore = payload["rng"]
        optimizer_state = payload["optimizer"]
        if history_path.exists():
            with open(history_path) as fh:
                history_rows = [tuple(r) for r in csv.reader(fh)][1:]

    last_good_ckpt: Path | None = ckpt_path if resume is not None else None
    loss_value = 0.0

    def write_history():
        with open(history_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["global_step", "stage", "step_in_stage", "loss"])
            writer.writerows(history_rows)

    def save(stage, step_in_stage, rng, optimizer):
        nonlocal last_good_ckpt
        save_checkpoint(
            ckpt_path, config, model.module_groups(), stage, step_in_stage,
            global_step, optimizer=optimizer, rng=rng.state(),
            extra={"latent_scale": float(model.latent_scale),
                   "stage_losses": stage_losses},
        )
        write_history()
        last_good_ckpt = ckpt_path

    for stage_idx in range(start_stage_idx, len(plan)):
        stage, num_steps = plan[stage_idx]
        first_step = start_step if stage_idx == start_stage_idx else 0
        if first_step >= num_steps:
            continue

        params = configure_stage(model, stage)
        optimizer = torch.optim.Adam(params, lr=stage_lr(config, stage))
        rng = _StageRng(_stage_seed(config.training.seed, stage))
        if stage_idx == start_stage_idx and rng_restore:
            rng.restore(rng_restore)
            if optimizer_state is not None:
                optimizer.load_state_dict(optimizer_state)
            rng_restore = None
            optimizer_state = None

        if stage == "joint" and first_step == 0:
            _seed_joint_stage(model)
            params = configure_stage(model, stage)
            optimizer = torch.optim.Adam(params, lr=stage_lr(config, stage))

        for step in range(first_step, num_steps):
            loss = _stage_step(model, stage, store, config, sched, rng)
            if not math.isfinite(float(loss.detach())):
                raise TrainingError(
                    f"{stage} loss became non-finite at step {step}; "
                    f"last good checkpoint: {last_good_ckpt}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_value = float(loss)
            global_step += 1
            history_rows.append((global_step, stage, step + 1, f"{loss_value:.8f}"))
            stage_losses[stage] = loss_value
            if max_total_steps is not None and global_step >= max_total_steps:
                save(stage, step + 1, rng, optimizer)
                return TrainResult(ckpt_path, history_path, loss_value,
                                   global_step, stage_losses)
            if (step + 1) % config.training.checkpoint_every == 0:
                save(stage, step + 1, rng, optimizer)
        save(stage, num_steps, rng, optimizer)

    return TrainResult(ckpt_path, history_path, loss_value, global_step, stage_losses)


def _pick_frames(store: ClipStore, config, rng: _StageRng, count: int):
    """Random (hr_frame, lq_clip ref) picks for frame-level stages."""
    picks = []
    for _ in range(count):
        clip_id = store.ids[int(rng.np.integers(len(store.ids)))]
        hr = store.hr[clip_id]
        fidx = int(rng.np.integers(len(hr)))
        q = int(rng.np.integers(config.training.quality_min, config.training.quality_max + 1))
        picks.append((clip_id, fidx, q))
    return picks


def _stage_step(model, stage, store, config, sched, rng) -> torch.Tensor:
    if stage == "vae":
        return _vae_step(model, store, config, rng)
    if stage == "diffusion":
        return _diffusion_step(model, store, config, sched, rng)
    if stage == "dcm":
        return _dcm_step(model, store, config, rng)
    return _joint_step(model, store, config, sched, rng)


def _vae_step(model, store, config, rng) -> torch.Tensor:
    picks = _pick_frames(store, config, rng, config.training.batch_clips * 2)
    frames = []
    for clip_id, fidx, q in picks:
        hr = store.hr[clip_id].frames[fidx]
        if rng.np.random() < 0.5:
            lq = store.lq(clip_id, q)
            frames.append(bicubic_up_clip(VideoClip(frames=[lq.frames[fidx]]),
                                          config.degradation.scale).frames[0])
        else:
            frames.append(hr)
    batch = _frames_to_tensor(VideoClip(frames=frames))
    loss, _ = model.vae.training_loss(batch, generator=rng.torch)
    return loss


def _encode_scaled(model, batch: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return model.vae.encode(batch) * model.latent_scale


def _calibrate_latent_scale(model, store, config) -> None:
    """One-time latent normalization so diffusion sees unit-ish variance."""
    frames = []
    for clip_id in store.ids[: min(8, len(store.ids))]:
        frames.extend(store.hr[clip_id].frames[:2])
    batch = _frames_to_tensor(VideoClip(frames=frames))
    with torch.no_grad():
        z = model.vae.encode(batch)
    std = float(z.std())
    model.latent_scale.fill_(1.0 / max(std, 1e-6))


def _diffusion_step(model, store, config, sched, rng) -> torch.Tensor:
    if model.latent_scale.item() == 1.0:
        _calibrate_latent_scale(model, store, config)
    picks = _pick_frames(store, config, rng, config.training.batch_clips * 2)
    frames = [store.hr[cid].frames[fidx] for cid, fidx, _ in picks]
    z0 = _encode_scaled(model, _frames_to_tensor(VideoClip(frames=frames)))
    t = int(rng.np.integers(1, sched.T + 1))
    eps = torch.randn(z0.shape, generator=rng.torch)
    z_t = q_sample(z0, t, eps, sched).x_t
    return noise_loss(eps, model.unet(z_t, t))


def _dcm_step(model, store, config, rng) -> torch.Tensor:
    picks = _pick_frames(store, config, rng, config.training.batch_clips * 2)
    lq_frames = []
    hr_frames = []
    for clip_id, fidx, q in picks:
        lq_frames.append(store.lq(clip_id, q).frames[fidx])
        hr_frames.append(store.hr[clip_id].frames[fidx])
    lq = _frames_to_tensor(VideoClip(frames=lq_frames))
    hr = _frames_to_tensor(VideoClip(frames=hr_frames))
    return F.l1_loss(model.precleaner(lq), hr)


def _seed_joint_stage(model) -> None:
    """Start the control branch from the pretrained denoiser encoder."""
    from .models import ControlBranch

    model.control = ControlBranch.from_unet(model.unet)


def _joint_step(model, store, config, sched, rng) -> torch.Tensor:
    t_cfg = config.training
    clip_ids = [store.ids[int(rng.np.integers(len(store.ids)))]
                for _ in range(max(1, t_cfg.batch_clips // 2))]
    total = None

    for clip_id in clip_ids:
        hr_clip = store.hr[clip_id]
        q = int(rng.np.integers(t_cfg.quality_min, t_cfg.quality_max + 1))
        lq_clip = store.lq(clip_id, q)
        lq = _frames_to_tensor(lq_clip)
        hr = _frames_to_tensor(hr_clip)

        x_hr = model.precleaner(lq).clamp(0.0, 1.0)
        aux = F.l1_loss(x_hr, hr)

        c_hr, enc_feats = model.vae.encode_with_features(x_hr)
        c_hr_scaled = c_hr * model.latent_scale

        z0 = _encode_scaled(model, hr)
        t = int(rng.np.integers(1, sched.T + 1))
        eps = torch.randn(z0.shape, generator=rng.torch)
        z_t = q_sample(z0, t, eps, sched).x_t
        temb = model.unet.time_embedding(t, z_t.shape[0], z_t.device)
        control = model.control(z_t, c_hr_scaled, temb)
        eps_hat = model.unet(z_t, t, control=control, prompt_fn=model.unet_prompt_fn())
        diff = noise_loss(eps, eps_hat)

        z_clean = model.vae.encode(hr).detach()
        sigma = float(rng.np.random()) * t_cfg.decoder_noise
        z_noisy = z_clean + sigma * torch.randn(z_clean.shape, generator=rng.torch)
        hooks = model.decoder_hooks(True, True, config.fusion.omega)
        recon = model.vae.decode(z_noisy, enc_feats=enc_feats, hooks=hooks)
        dec = F.l1_loss(recon, hr)

        loss = diff + t_cfg.aux_weight * aux + t_cfg.decoder_weight * dec
        total = loss if total is None else total + loss

    return total / len(clip_ids)
