"""Motion-error energy over a latent clip and the gradient-corrected
reverse step.

The energy is a bidirectional L1 discrepancy between flow-warped latents
and their temporal neighbours; its gradient with respect to the sampled
latents (computed by autograd, with the L1 subgradient at zero taken as
zero) is subtracted from the plain reverse step, scaled by the schedule's
posterior variance. An optional halving line search keeps a step from
ever increasing the energy on its own flows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .diffusion import NoiseSchedule, p_step
from .errors import ContractError
from .flow import FlowPair
from .warp import warp

LINE_SEARCH_MAX_HALVINGS = 10


@dataclass
class GuidanceState:
    """Per-step guidance bookkeeping."""

    enabled: bool = True
    lam: float = 1.0
    normalize: bool = True
    line_search: bool = True
    energy: float = 0.0

    def __post_init__(self):
        if self.energy < 0:
            raise ContractError("motion error must be non-negative")


def motion_error(latents: torch.Tensor | Sequence[torch.Tensor], flows: FlowPair | None,
                 normalize: bool = True) -> torch.Tensor:
    """Bidirectional warped-neighbour L1 over an (N, C, h, w) latent clip.

    Zero for single-frame clips. When ``normalize`` is set the raw sum is
    divided by the total element count of both sums, making the value
    resolution-independent.
    """
    if not torch.is_tensor(latents):
        latents = torch.stack(list(latents), dim=0)
    n = latents.shape[0]
    if n == 1:
        return latents.sum() * 0.0
    if flows is None or flows.num_pairs != n - 1:
        have = 0 if flows is None else flows.num_pairs
        raise ContractError(f"clip of {n} frames needs {n - 1} flow pairs, got {have}")
    total = latents.sum() * 0.0
    count = 0
    for i in range(n - 1):
        pred = warp(latents[i], flows.backward[i])
        total = total + (pred - latents[i + 1]).abs().sum()
        count += latents[i + 1].numel()
    for i in range(1, n):
        pred = warp(latents[i], flows.forward[i - 1])
        total = total + (pred - latents[i - 1]).abs().sum()
        count += latents[i - 1].numel()
    return total / count if normalize else total


def motion_energy_grad(latents: torch.Tensor, flows: FlowPair | None,
                       normalize: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Energy and its gradient w.r.t. the latents (works under no_grad)."""
    with torch.enable_grad():
        z = latents.detach().clone().requires_grad_(True)
        energy = motion_error(z, flows, normalize=normalize)
        if z.shape[0] == 1:
            return energy.detach(), torch.zeros_like(latents)
        (grad,) = torch.autograd.grad(energy, z)
    return energy.detach(), grad


def guided_step(
    z_clip: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    flows: FlowPair | None,
    guide: GuidanceState,
    eps_fn: Callable[[torch.Tensor, int], torch.Tensor],
    t_prev: int | None = None,
    mode: str = "ddim",
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One reverse step over a whole latent clip with flow-gradient correction.

    The base step is the per-frame reverse step with eps_fn's prediction;
    the correction subtracts sigma_t^2 * lam * grad(E) evaluated at the
    base step's output. Disabled guidance, single frames or a zero scale
    return the base step unchanged.
    """
    if guide.enabled and z_clip.shape[0] > 1 and flows is None:
        raise ContractError("guidance enabled but no flows supplied")
    with torch.no_grad():
        eps_hat = eps_fn(z_clip, t)
        base = p_step(z_clip, t, eps_hat, sched, mode=mode, noise=noise, t_prev=t_prev)

    scale = sched.sigma2_at(t) * guide.lam
    if not guide.enabled or z_clip.shape[0] == 1 or scale == 0.0:
        guide.energy = float(motion_error(base, flows, guide.normalize)) if (
            guide.enabled and z_clip.shape[0] > 1
        ) else 0.0
        return base

    energy, grad = motion_energy_grad(base, flows, normalize=guide.normalize)
    candidate = base - scale * grad
    if guide.line_search:
        with torch.no_grad():
            for _ in range(LINE_SEARCH_MAX_HALVINGS):
                if motion_error(candidate, flows, guide.normalize) <= energy:
                    break
                scale *= 0.5
                candidate = base - scale * grad
            else:
                candidate = base
    guide.energy = float(motion_error(candidate, flows, guide.normalize))
    return candidate
