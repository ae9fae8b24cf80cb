"""Noise schedules, forward diffusion, reverse stepping and the training loss.

Forward process (closed form):

    x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps,   eps ~ N(0, I)

with abar_t the cumulative product of alpha_t = 1 - beta_t. The reverse
step supports stochastic posterior sampling ("ddpm") and the deterministic
rule ("ddim") over an arbitrary timestep subsequence.

Timesteps are 1-indexed: t in [1, T], with abar_0 defined as 1.
Schedule tables are built and stored in float64; tensor math runs in the
dtype of the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import math

import numpy as np
import torch

from .errors import ContractError, ParameterError

# Denoised estimates are clipped to this band so guidance gradients stay
# bounded on unconverged models.
X0_CLIP = 1.5


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable per-step beta/alpha/abar/posterior-variance tables."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        """abar_t for t in [0, T]; abar_0 == 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        return float(self.beta[t - 1])

    def sigma2_at(self, t: int) -> float:
        return float(self.sigma2[t - 1])

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ContractError(f"timestep t={t} outside [1, {self.T}]")


@dataclass(frozen=True)
class DiffusionSample:
    """A noised sample x_t with its timestep and (optionally) the noise used."""

    x_t: torch.Tensor
    t: int
    eps: torch.Tensor | None = None


def build_schedule(T: int, eta1: float, etaT: float) -> NoiseSchedule:
    """Linear-in-beta schedule from eta1 to etaT over t = 1..T.

    sigma_t^2 = beta_t * (1 - abar_{t-1}) / (1 - abar_t), with abar_0 = 1
    (so sigma_1^2 == 0).
    """
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not 0.0 < eta1:
        raise ParameterError(f"eta1 must satisfy 0 < eta1, got {eta1}")
    if eta1 > etaT:
        raise ParameterError(f"eta1 must satisfy eta1 <= etaT, got eta1={eta1} > etaT={etaT}")
    if not etaT < 1.0:
        raise ParameterError(f"etaT must satisfy etaT < 1, got {etaT}")

    beta = np.linspace(eta1, etaT, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    abar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma2 = beta * (1.0 - abar_prev) / (1.0 - alpha_bar)
    for arr in (beta, alpha, alpha_bar, sigma2):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma2=sigma2)


def q_sample(x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> DiffusionSample:
    """Noise a clean sample to step t in one shot."""
    sched.check_t(t)
    if eps.shape != x0.shape:
        raise ContractError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    abar = sched.alpha_bar_at(t)
    x_t = math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps
    return DiffusionSample(x_t=x_t, t=t, eps=eps)


def predict_x0(x_t: torch.Tensor, t: int, eps_hat: torch.Tensor, sched: NoiseSchedule,
               clip: bool = True) -> torch.Tensor:
    """Invert the forward relation for the denoised estimate x0_hat."""
    abar = sched.alpha_bar_at(t)
    x0 = (x_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)
    if clip:
        x0 = x0.clamp(-X0_CLIP, X0_CLIP)
    return x0


def p_step(
    x_t: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    sched: NoiseSchedule,
    mode: str = "ddim",
    noise: torch.Tensor | None = None,
    t_prev: int | None = None,
) -> torch.Tensor:
    """One reverse step t -> t_prev (default t-1).

    ddpm: posterior mean around the clipped x0_hat plus sqrt(sigma_t^2) * noise;
    only supports t_prev == t - 1. ddim: deterministic step, valid for any
    earlier t_prev; t_prev == 0 returns x0_hat itself.
    """
    sched.check_t(t)
    if eps_hat.shape != x_t.shape:
        raise ContractError(f"eps_hat shape {tuple(eps_hat.shape)} != x_t shape {tuple(x_t.shape)}")
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ContractError(f"t_prev={t_prev} must lie in [0, t) for t={t}")

    x0_hat = predict_x0(x_t, t, eps_hat, sched)
    abar_t = sched.alpha_bar_at(t)
    abar_prev = sched.alpha_bar_at(t_prev)

    if mode == "ddim":
        return math.sqrt(abar_prev) * x0_hat + math.sqrt(1.0 - abar_prev) * eps_hat

    if mode == "ddpm":
        if t_prev != t - 1:
            raise ContractError("ddpm mode steps one t at a time (t_prev must be t-1)")
        beta_t = sched.beta_at(t)
        alpha_t = 1.0 - beta_t
        mean = (
            math.sqrt(abar_prev) * beta_t / (1.0 - abar_t) * x0_hat
            + math.sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t) * x_t
        )
        if t > 1:
            if noise is None:
                raise ContractError("ddpm mode requires a noise argument for t > 1")
            mean = mean + math.sqrt(sched.sigma2_at(t)) * noise
        return mean

    raise ParameterError(f"unknown sampler mode {mode!r}")


def noise_loss(eps_true: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise."""
    if eps_true.shape != eps_hat.shape:
        raise ContractError(
            f"eps shapes differ: {tuple(eps_true.shape)} vs {tuple(eps_hat.shape)}"
        )
    return torch.mean((eps_true - eps_hat) ** 2)


def sampling_timesteps(T: int, n: int) -> list[int]:
    """n uniformly spaced timesteps over [1, T], descending, always ending at 1."""
    if not 1 <= n <= T:
        raise ParameterError(f"sampling steps n={n} must lie in [1, T={T}]")
    ts = np.unique(np.round(np.linspace(1, T, n)).astype(int))
    return [int(t) for t in ts[::-1]]


def ddim_sample(
    eps_fn: Callable[[torch.Tensor, int], torch.Tensor],
    x_init: torch.Tensor,
    sched: NoiseSchedule,
    steps: int | Sequence[int],
) -> torch.Tensor:
    """Run the deterministic reverse trajectory from x_T down to x_0.

    ``steps`` is either a step count (spaced uniformly) or an explicit
    descending timestep sequence starting at T.
    """
    ts = sampling_timesteps(sched.T, steps) if isinstance(steps, int) else list(steps)
    x = x_init
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        x = p_step(x, t, eps_fn(x, t), sched, mode="ddim", t_prev=t_prev)
    return x
