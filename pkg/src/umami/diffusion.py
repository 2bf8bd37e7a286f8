"""DDPM machinery for per-token denoising.

Linear beta schedule, forward corruption q(x_t | x_0), guided reverse steps
over a strided subsequence of the training timesteps, and full per-token
sampling with classifier-free guidance and a noise temperature (applied as a
multiplier on the injected posterior noise only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch


class DiffusionError(ValueError):
    pass


def strided_steps(t_train: int, t_sample: int) -> np.ndarray:
    """Strictly increasing subsequence of [0, t_train) ending at t_train - 1."""
    if not 1 <= t_sample <= t_train:
        raise DiffusionError(f"t_sample must be in [1, {t_train}], got {t_sample}")
    if t_sample == 1:
        return np.array([t_train - 1], dtype=np.int64)
    return np.unique(np.round(np.linspace(0, t_train - 1, t_sample)).astype(np.int64))


@dataclass
class NoiseSchedule:
    """Beta/alpha-bar tables plus the strided sampling subsequence."""

    t_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_sample: int = 50
    betas: torch.Tensor = field(init=False, repr=False)
    alphas_cumprod: torch.Tensor = field(init=False, repr=False)
    sampling_steps: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.t_train < 1:
            raise DiffusionError("t_train must be >= 1")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise DiffusionError("need 0 < beta_start < beta_end < 1")
        self.betas = torch.linspace(
            self.beta_start, self.beta_end, self.t_train, dtype=torch.float64
        )
        self.alphas_cumprod = torch.cumprod(1.0 - self.betas, dim=0)
        self.sampling_steps = strided_steps(self.t_train, self.t_sample)

    def alpha_bar(self, t: int) -> float:
        """alpha-bar at integer timestep; t = -1 denotes the clean data point."""
        if t == -1:
            return 1.0
        return float(self.alphas_cumprod[t])


def forward_noise(
    x0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """q(x_t | x_0): sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if not 0 <= t < schedule.t_train:
        raise DiffusionError(f"timestep {t} outside [0, {schedule.t_train})")
    ab = schedule.alphas_cumprod[t]
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def forward_noise_batch(
    x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Row-wise forward_noise for per-token timesteps; x0/eps are (N, d)."""
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() and (bool((t < 0).any()) or bool((t >= schedule.t_train).any())):
        raise DiffusionError(f"timestep outside [0, {schedule.t_train})")
    ab = schedule.alphas_cumprod[t][:, None]
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def guided_noise(
    eps_cond: torch.Tensor, eps_uncond: torch.Tensor, cfg_scale: float
) -> torch.Tensor:
    """eps_uncond + s * (eps_cond - eps_uncond); scale 1 returns eps_cond untouched."""
    if cfg_scale == 1.0:
        return eps_cond
    return eps_uncond + cfg_scale * (eps_cond - eps_uncond)


def reverse_step(
    x_t: torch.Tensor,
    t_hi: int,
    t_lo: int,
    eps_cond: torch.Tensor,
    eps_uncond: torch.Tensor | None,
    cfg_scale: float,
    temperature: float,
    noise: torch.Tensor | None,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """One guided DDPM posterior step from timestep t_hi down to t_lo.

    The strided pair (t_hi, t_lo) acts as one step of an equivalent coarser
    diffusion with effective alpha = ab_hi / ab_lo. t_lo = -1 denotes the
    final denoise to the clean token, where no noise is injected. `noise`
    carries the caller's standard-normal draw so per-token rng streams stay
    with the caller.
    """
    if not t_hi > t_lo >= -1:
        raise DiffusionError(f"need t_hi > t_lo >= -1, got ({t_hi}, {t_lo})")
    eps_hat = eps_cond if eps_uncond is None else guided_noise(eps_cond, eps_uncond, cfg_scale)
    if not bool(torch.isfinite(eps_hat).all()):
        raise FloatingPointError("non-finite noise prediction in reverse step")
    ab_hi = schedule.alpha_bar(t_hi)
    ab_lo = schedule.alpha_bar(t_lo)
    alpha = ab_hi / ab_lo
    beta = 1.0 - alpha
    x0 = (x_t - math.sqrt(1.0 - ab_hi) * eps_hat) / math.sqrt(ab_hi)
    mean = (
        math.sqrt(ab_lo) * beta / (1.0 - ab_hi) * x0
        + math.sqrt(alpha) * (1.0 - ab_lo) / (1.0 - ab_hi) * x_t
    )
    if t_lo == -1:
        return mean
    if noise is None:
        raise DiffusionError("noise draw required for non-final reverse steps")
    var = beta * (1.0 - ab_lo) / (1.0 - ab_hi)
    return mean + temperature * math.sqrt(var) * noise


DenoiseFn = Callable[[torch.Tensor, int], tuple[torch.Tensor, torch.Tensor | None]]
NoiseFn = Callable[[object], torch.Tensor]


def sample_tokens(
    denoise_fn: DenoiseFn,
    noise_fn: NoiseFn,
    schedule: NoiseSchedule,
    cfg_scale: float,
    temperature: float,
) -> torch.Tensor:
    """Run the strided reverse chain from pure noise; returns clamped tokens.

    denoise_fn(x_t, t) -> (eps_cond, eps_uncond or None) for a (N, d) batch;
    noise_fn(label) -> (N, d) standard normal rows, called with "init" for the
    starting draw and with the integer timestep for each injected-noise draw.
    """
    x = noise_fn("init")
    ladder = [int(t) for t in reversed(schedule.sampling_steps)]
    for i, t_hi in enumerate(ladder):
        t_lo = ladder[i + 1] if i + 1 < len(ladder) else -1
        eps_cond, eps_uncond = denoise_fn(x, t_hi)
        noise = noise_fn(t_hi) if t_lo != -1 else None
        x = reverse_step(
            x, t_hi, t_lo, eps_cond, eps_uncond, cfg_scale, temperature, noise, schedule
        )
    return x.clamp(-1.0, 1.0)
