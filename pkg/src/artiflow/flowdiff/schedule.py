"""DDPM noising schedule and the forward (noising) process.

Timesteps are 1-based: t in [1, T], with alpha_bar[t-1] the cumulative
product up to step t.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..artkin import FlowField

DEFAULT_T = 100
BETA_START = 1e-4
BETA_END = 0.02


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("T must be >= 1")
        for name in ("betas", "alphas", "alpha_bars"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have length T")
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")


def make_schedule(T: int = DEFAULT_T, kind: str = "linear") -> DiffusionSchedule:
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind '{kind}'")
    betas = np.linspace(BETA_START, BETA_END, T)
    alphas = 1.0 - betas
    return DiffusionSchedule(T=T, betas=betas, alphas=alphas,
                             alpha_bars=np.cumprod(alphas))


@dataclass
class NoisedSample:
    points: Optional[np.ndarray]
    noisy_flow: np.ndarray
    t: int
    target_noise: np.ndarray

    def __post_init__(self):
        if self.noisy_flow.shape != self.target_noise.shape:
            raise ValueError("noisy_flow and target_noise shapes must agree")
        if self.points is not None and self.points.shape != self.noisy_flow.shape:
            raise ValueError("points shape must agree with noisy_flow")


def add_noise(flow: FlowField | np.ndarray, t: int, schedule: DiffusionSchedule,
              rng: np.random.Generator, points: Optional[np.ndarray] = None) -> NoisedSample:
    """Forward-noise a clean flow field to step t:
    x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must be in [1, {schedule.T}], got {t}")
    x0 = flow.vectors if isinstance(flow, FlowField) else np.asarray(flow, dtype=float)
    ab = schedule.alpha_bars[t - 1]
    eps = rng.standard_normal(x0.shape)
    noisy = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return NoisedSample(points=points, noisy_flow=noisy, t=t, target_noise=eps)
