"""Variance schedule and forward (noising) process.

Noise is always an explicit argument; nothing in this module draws random
numbers except :func:`coupled_pair`, which takes a caller-owned generator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """``alphas[t]`` and ``alpha_bars[t]`` for ``t = 0..T``; index 0 is the noiseless identity."""

    T: int
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.alphas.shape != (self.T + 1,) or self.alpha_bars.shape != (self.T + 1,):
            raise ValueError("schedule arrays must have length T + 1")
        if np.any(np.diff(self.alpha_bars) > 0):
            raise ValueError("alpha_bars must be non-increasing")
        if self.alpha_bars[-1] <= 0:
            raise ValueError("alpha_bars[T] must stay positive")
        self.alphas.setflags(write=False)
        self.alpha_bars.setflags(write=False)

    def check_step(self, t: int, *, allow_zero: bool = False) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"time step {t} outside [{lo}, {self.T}]")
        return t


def make_linear_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                         beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 <= beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 <= beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = np.concatenate([[1.0], 1.0 - betas])
    return NoiseSchedule(T=T, alphas=alphas, alpha_bars=np.cumprod(alphas))


def validate_steps(steps: Sequence[int], schedule: NoiseSchedule | None = None) -> tuple[int, ...]:
    """Check a time-step set: non-empty, strictly increasing, inside ``[0, T]``."""
    steps = tuple(int(s) for s in steps)
    if not steps:
        raise ValueError("time-step set must not be empty")
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError(f"time steps must be strictly increasing, got {steps}")
    if steps[0] < 0:
        raise ValueError("time steps must be >= 0")
    if schedule is not None and steps[-1] > schedule.T:
        raise ValueError(f"time step {steps[-1]} exceeds T={schedule.T}")
    return steps


def _sqrt(x):
    return float(np.sqrt(x))


def forward_step(prev, t: int, schedule: NoiseSchedule, noise):
    """One noising step: ``sqrt(a_t) * prev + sqrt(1 - a_t) * noise``."""
    t = schedule.check_step(t)
    if np.shape(prev) != np.shape(noise):
        raise ValueError(f"noise shape {tuple(np.shape(noise))} != image shape {tuple(np.shape(prev))}")
    a = schedule.alphas[t]
    return _sqrt(a) * prev + _sqrt(1.0 - a) * noise


def forward_jump(clean, t: int, schedule: NoiseSchedule, noise):
    """Closed-form ``I_t`` from the clean image; ``t = 0`` returns ``clean``."""
    t = schedule.check_step(t, allow_zero=True)
    if np.shape(clean) != np.shape(noise):
        raise ValueError(f"noise shape {tuple(np.shape(noise))} != image shape {tuple(np.shape(clean))}")
    ab = schedule.alpha_bars[t]
    if t == 0:
        return clean * 1.0
    return _sqrt(ab) * clean + _sqrt(1.0 - ab) * noise


def stage1_loss(predicted_prev, true_prev):
    """Mean absolute error between the predicted and actual previous-step image."""
    if tuple(np.shape(predicted_prev)) != tuple(np.shape(true_prev)):
        raise ValueError(f"shape mismatch: {tuple(np.shape(predicted_prev))} vs {tuple(np.shape(true_prev))}")
    if isinstance(predicted_prev, torch.Tensor) or isinstance(true_prev, torch.Tensor):
        return (torch.as_tensor(true_prev) - torch.as_tensor(predicted_prev)).abs().mean()
    diff = np.asarray(true_prev, dtype=np.float64) - np.asarray(predicted_prev, dtype=np.float64)
    if diff.size == 0:
        raise ValueError("empty fields")
    return float(np.abs(diff).mean())


def coupled_pair(clean: torch.Tensor, t: torch.Tensor, schedule: NoiseSchedule,
                 generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Training sample ``(I_t, I_{t-1})`` for a batch, sharing one noise path.

    ``I_{t-1}`` is the closed-form jump to ``t - 1`` and ``I_t`` one further
    step from it, so the regression target is the concrete predecessor of the
    network input.  ``t`` holds one step per batch element, each in ``[1, T]``.
    """
    eps_jump = torch.randn(clean.shape, generator=generator, dtype=clean.dtype)
    eps_step = torch.randn(clean.shape, generator=generator, dtype=clean.dtype)
    ab_prev = torch.tensor(schedule.alpha_bars, dtype=clean.dtype)[t - 1].view(-1, *([1] * (clean.dim() - 1)))
    a_t = torch.tensor(schedule.alphas, dtype=clean.dtype)[t].view_as(ab_prev)
    prev = ab_prev.sqrt() * clean + (1.0 - ab_prev).sqrt() * eps_jump
    noisy = a_t.sqrt() * prev + (1.0 - a_t).sqrt() * eps_step
    return noisy, prev
