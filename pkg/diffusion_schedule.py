"""
Linear noise schedule and the diffusion forward process.

Images are noised in the normalized range [-1, 1]:

    z_t = sqrt(alpha_bar_t) * z_0 + sqrt(1 - alpha_bar_t) * eps

where alpha_bar_t = prod_{s<=t} (1 - beta_s) and (1 - alpha_bar_t) is the
variance of the added noise.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import torch

from errors import ScheduleError, ShapeError
from models import ScheduleConfig

logger = logging.getLogger(__name__)

StepIndex = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    betas: torch.Tensor
    alpha_bars: torch.Tensor


def build_schedule(num_steps: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Build a linear beta schedule and its cumulative products (float64)."""
    if num_steps < 1:
        raise ScheduleError(f"num_steps must be >= 1, got {num_steps}")
    if beta_max >= 1:
        raise ScheduleError(f"beta_max must be < 1, got {beta_max}")
    if not 0 <= beta_min <= beta_max:
        raise ScheduleError(
            f"require 0 <= beta_min <= beta_max, got beta_min={beta_min}, beta_max={beta_max}"
        )

    betas = torch.linspace(beta_min, beta_max, num_steps, dtype=torch.float64)
    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    return NoiseSchedule(num_steps=num_steps, betas=betas, alpha_bars=alpha_bars)


def schedule_from_config(config: ScheduleConfig) -> NoiseSchedule:
    return build_schedule(config.num_steps, config.beta_min, config.beta_max)


def _check_steps(schedule: NoiseSchedule, t: StepIndex) -> torch.Tensor:
    steps = torch.as_tensor(t, dtype=torch.long)
    if steps.numel() and (steps.min() < 0 or steps.max() >= schedule.num_steps):
        raise ScheduleError(
            f"step index out of range [0, {schedule.num_steps - 1}]: {steps.tolist()}"
        )
    return steps


def forward_diffuse(
    schedule: NoiseSchedule,
    z0: torch.Tensor,
    t: StepIndex,
    noise: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Noise ``z0`` to step ``t``.

    ``t`` is either a single step or one step per leading (batch) element.
    When ``noise`` is omitted it is drawn from N(0, I) with ``generator``.
    """
    steps = _check_steps(schedule, t)
    if noise is None:
        noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype, device=z0.device)
    elif noise.shape != z0.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != image shape {tuple(z0.shape)}")

    alpha_bar = schedule.alpha_bars.to(z0.device)[steps].to(z0.dtype)
    if alpha_bar.dim() == 1:
        if alpha_bar.shape[0] != z0.shape[0]:
            raise ShapeError(
                f"got {alpha_bar.shape[0]} step indices for a batch of {z0.shape[0]}"
            )
        alpha_bar = alpha_bar.view(-1, *([1] * (z0.dim() - 1)))

    return torch.sqrt(alpha_bar) * z0 + torch.sqrt(1.0 - alpha_bar) * noise
