"""Pipeline configuration: one structured YAML file covering every module.

Two hashes are derived from a config. ``hash()`` canonicalizes the whole
config (so key order never matters); ``structural_hash()`` covers only
the keys that determine checkpoint compatibility (schedule identity and
network shapes), so runtime knobs (quality, omega, variant switches,
sampler settings) can vary against one checkpoint.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .errors import ConfigurationError, ParameterError


@dataclass
class ScheduleConfig:
    steps_total: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.0120
    sampler: str = "ddim"
    sampling_steps: int = 50


@dataclass
class DegradationConfig:
    scale: int = 4
    quality: int = 25
    block: int = 8
    seed: int = 0


@dataclass
class VaeConfig:
    base_channels: int = 32
    latent_channels: int = 4
    kl_weight: float = 1e-6


@dataclass
class UnetConfig:
    widths: tuple[int, int, int] = (32, 64, 128)


@dataclass
class DcmConfig:
    blocks: int = 6
    window: int = 8
    channels: int = 32
    pretrain_steps: int = 300


@dataclass
class CapmConfig:
    K: int = 5
    prompt_hw: int = 8
    levels: dict = field(default_factory=lambda: {"unet": [0, 1], "vae": [0, 1, 2]})


@dataclass
class StamConfig:
    levels: tuple[int, ...] = (0,)


@dataclass
class FusionConfig:
    omega: float = 0.75

    def __post_init__(self):
        if not 0.0 <= self.omega <= 1.0:
            raise ParameterError(f"fusion.omega must lie in [0, 1], got {self.omega}")


@dataclass
class ColorCorrectConfig:
    enabled: bool = True


@dataclass
class GuidanceConfig:
    enabled: bool = True
    lam: float = 1.0
    normalize: bool = True
    recompute_flows: bool = True


@dataclass
class FlowConfig:
    pyramid_levels: int = 3
    iterations: int = 4


@dataclass
class TrainingConfig:
    lr: float = 5e-5
    stage_lr: dict = field(default_factory=dict)
    batch_clips: int = 4
    clip_len: int = 5
    seed: int = 0
    vae_steps: int = 400
    diffusion_steps: int = 600
    joint_steps: int = 400
    checkpoint_every: int = 200
    quality_min: int = 10
    quality_max: int = 40
    aux_weight: float = 1.0
    decoder_weight: float = 1.0
    decoder_noise: float = 0.3


@dataclass
class DatasetConfig:
    root: str = "data/train"
    num_clips: int = 24
    frames_per_clip: int = 5
    resolution: int = 64
    holdout: int = 4
    texture_seed: int = 0
    motion: dict = field(default_factory=lambda: {"translate": True, "rotate": True,
                                                  "occluders": True})


_SECTIONS = {
    "schedule": ScheduleConfig,
    "degradation": DegradationConfig,
    "vae": VaeConfig,
    "unet": UnetConfig,
    "dcm": DcmConfig,
    "capm": CapmConfig,
    "stam": StamConfig,
    "fusion": FusionConfig,
    "color_correct": ColorCorrectConfig,
    "guidance": GuidanceConfig,
    "flow": FlowConfig,
    "training": TrainingConfig,
    "dataset": DatasetConfig,
}

# YAML spellings that differ from the dataclass field names
_FIELD_ALIASES = {"guidance": {"lambda": "lam"}}


@dataclass
class PipelineConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    unet: UnetConfig = field(default_factory=UnetConfig)
    dcm: DcmConfig = field(default_factory=DcmConfig)
    capm: CapmConfig = field(default_factory=CapmConfig)
    stam: StamConfig = field(default_factory=StamConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    color_correct: ColorCorrectConfig = field(default_factory=ColorCorrectConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    enable_dcm: bool = True
    enable_capm: bool = True
    enable_stam: bool = True

    @property
    def enable_guidance(self) -> bool:
        return self.guidance.enabled

    @property
    def enable_color_correct(self) -> bool:
        return self.color_correct.enabled

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        d["guidance"]["lambda"] = d["guidance"].pop("lam")
        d["enable_dcm"] = self.enable_dcm
        d["enable_capm"] = self.enable_capm
        d["enable_stam"] = self.enable_stam
        # tuples -> lists so the dict is YAML/JSON clean
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        raw = dict(raw or {})
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            body = raw.pop(name, {})
            if not isinstance(body, dict):
                raise ConfigurationError(f"section {name!r} must be a mapping")
            body = dict(body)
            for alias, target in _FIELD_ALIASES.get(name, {}).items():
                if alias in body:
                    body[target] = body.pop(alias)
            known = {f.name for f in fields(section_cls)}
            unknown = set(body) - known
            if unknown:
                raise ConfigurationError(
                    f"unknown keys in section {name!r}: {sorted(unknown)}"
                )
            if "widths" in body:
                body["widths"] = tuple(body["widths"])
            if "levels" in body and isinstance(body["levels"], (list, tuple)):
                body["levels"] = tuple(body["levels"])
            kwargs[name] = section_cls(**body)
        for switch in ("enable_dcm", "enable_capm", "enable_stam"):
            if switch in raw:
                kwargs[switch] = bool(raw.pop(switch))
        if "enable_guidance" in raw:
            kwargs["guidance"] = replace(kwargs["guidance"], enabled=bool(raw.pop("enable_guidance")))
        if "enable_color_correct" in raw:
            kwargs["color_correct"] = replace(
                kwargs["color_correct"], enabled=bool(raw.pop("enable_color_correct"))
            )
        if raw:
            raise ConfigurationError(f"unknown top-level config keys: {sorted(raw)}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def structural_hash(self) -> str:
        d = self.to_dict()
        structural = {
            "schedule": {k: d["schedule"][k] for k in ("steps_total", "beta_start", "beta_end")},
            "vae": d["vae"],
            "unet": d["unet"],
            "dcm": {k: d["dcm"][k] for k in ("blocks", "window", "channels")},
            "capm": d["capm"],
            "stam": d["stam"],
        }
        blob = json.dumps(structural, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_variants(self, **switches) -> "PipelineConfig":
        """Copy with inference-time switches applied (enable_dcm, enable_capm,
        enable_stam, enable_guidance, enable_color_correct, omega)."""
        cfg = replace(self)
        for key, value in switches.items():
            if value is None:
                continue
            if key in ("enable_dcm", "enable_capm", "enable_stam"):
                cfg = replace(cfg, **{key: bool(value)})
            elif key == "enable_guidance":
                cfg = replace(cfg, guidance=replace(cfg.guidance, enabled=bool(value)))
            elif key == "enable_color_correct":
                cfg = replace(cfg, color_correct=replace(cfg.color_correct, enabled=bool(value)))
            elif key == "omega":
                cfg = replace(cfg, fusion=replace(cfg.fusion, omega=float(value)))
            else:
                raise ConfigurationError(f"unknown variant switch {key!r}")
        return cfg
