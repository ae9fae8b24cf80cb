"""Self-describing checkpoint containers.

A checkpoint bundles named module state dicts, the optimizer state, every
RNG state needed to resume bit-exactly, and a manifest carrying the full
config, its hashes, the training position and the package version.
Loading against a config with a different structural hash refuses with a
summary of the differing keys.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import torch

from . import __version__
from .config import PipelineConfig
from .errors import ConfigurationError


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}.{k}" if prefix else str(k)
        if isinstance(v, dict):
            out.update(_flatten(v, key))
        else:
            out[key] = v
    return out


def config_diff(a: dict, b: dict) -> list[str]:
    fa, fb = _flatten(a), _flatten(b)
    lines = []
    for key in sorted(set(fa) | set(fb)):
        va, vb = fa.get(key, "<missing>"), fb.get(key, "<missing>")
        if va != vb:
            lines.append(f"{key}: checkpoint={va!r} requested={vb!r}")
    return lines


def save_checkpoint(
    path: str | Path,
    config: PipelineConfig,
    modules: dict[str, torch.nn.Module],
    stage: str,
    step_in_stage: int,
    global_step: int,
    optimizer: torch.optim.Optimizer | None = None,
    rng: dict | None = None,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "manifest": {
            "version": __version__,
            "config": config.to_dict(),
            "config_hash": config.hash(),
            "structural_hash": config.structural_hash(),
            "stage": stage,
            "step_in_stage": step_in_stage,
            "global_step": global_step,
            "modules": sorted(modules),
            "extra": extra or {},
        },
        "modules": {name: mod.state_dict() for name, mod in modules.items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng": rng or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, config: PipelineConfig | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if config is not None:
        want = config.structural_hash()
        have = payload["manifest"]["structural_hash"]
        if want != have:
            diff = config_diff(payload["manifest"]["config"], config.to_dict())
            raise ConfigurationError(
                "checkpoint/config structural hash mismatch "
                f"({have} vs {want}); differing keys:\n  " + "\n  ".join(diff)
            )
    return payload


def restore_modules(payload: dict, modules: dict[str, torch.nn.Module],
                    strict: bool = True) -> None:
    for name, mod in modules.items():
        if name not in payload["modules"]:
            if strict:
                raise ConfigurationError(f"checkpoint is missing module {name!r}")
            continue
        mod.load_state_dict(payload["modules"][name])
