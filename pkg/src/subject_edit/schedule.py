"""Noise schedules and deterministic DDIM stepping.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``t = 0`` denotes the
clean latent (``alpha_bar(0) == 1``). Every stepping function only does
scalar arithmetic on its array arguments, so numpy arrays and torch tensors
are both accepted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    total_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at 1-based step ``t``; ``t = 0`` is clean."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.total_steps:
            raise ValueError(f"timestep {t} outside [0, {self.total_steps}]")
        return float(self.alpha_bars[t - 1])

    def inference_timesteps(self, num_steps: int) -> list[int]:
        """Uniformly strided ascending timesteps ending at T (e.g. 20, 40, ..., 1000)."""
        if not 1 <= num_steps <= self.total_steps:
            raise ValueError(f"num_steps must lie in [1, {self.total_steps}], got {num_steps}")
        return [round(k * self.total_steps / num_steps) for k in range(1, num_steps + 1)]


def build_schedule(
    total_steps: int = 1000,
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
    spacing: Literal["linear", "scaled_linear"] = "scaled_linear",
) -> NoiseSchedule:
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    if spacing == "linear":
        betas = np.linspace(beta_start, beta_end, total_steps, dtype=np.float64)
    elif spacing == "scaled_linear":
        betas = np.linspace(beta_start**0.5, beta_end**0.5, total_steps, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(total_steps, betas, alphas, alpha_bars)


def _check_t(t: int, sched: NoiseSchedule, lo: int = 1) -> None:
    if not lo <= t <= sched.total_steps:
        raise ValueError(f"timestep {t} outside [{lo}, {sched.total_steps}]")


def add_noise(z0, eps, t: int, sched: NoiseSchedule):
    """Forward q-sample: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    _check_t(t, sched)
    if tuple(z0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    abar = sched.alpha_bar(t)
    return math.sqrt(abar) * z0 + math.sqrt(1.0 - abar) * eps


def predict_clean(z_t, eps_pred, t: int, sched: NoiseSchedule):
    abar = sched.alpha_bar(t)
    return (z_t - math.sqrt(1.0 - abar) * eps_pred) / math.sqrt(abar)


def ddim_denoise_step(z_t, eps_pred, t: int, t_prev: int, sched: NoiseSchedule):
    """Deterministic (eta = 0) DDIM update from ``t`` down to ``t_prev``."""
    if t_prev >= t:
        raise ValueError(f"denoising needs t_prev < t, got t_prev={t_prev}, t={t}")
    _check_t(t, sched)
    _check_t(t_prev, sched, lo=0)
    z0_hat = predict_clean(z_t, eps_pred, t, sched)
    abar_prev = sched.alpha_bar(t_prev)
    return math.sqrt(abar_prev) * z0_hat + math.sqrt(1.0 - abar_prev) * eps_pred


def ddim_invert_step(z_tprev, eps_pred, t_prev: int, t: int, sched: NoiseSchedule):
    """Exact algebraic inverse of :func:`ddim_denoise_step` for the same ``eps_pred``."""
    if t <= t_prev:
        raise ValueError(f"inversion needs t > t_prev, got t_prev={t_prev}, t={t}")
    _check_t(t, sched)
    _check_t(t_prev, sched, lo=0)
    z0_hat = predict_clean(z_tprev, eps_pred, t_prev, sched)
    abar = sched.alpha_bar(t)
    return math.sqrt(abar) * z0_hat + math.sqrt(1.0 - abar) * eps_pred


@dataclass
class TimestepSampler:
    """Uniform integer sampler over the closed interval ``[t_min, t_max]``."""

    t_min: int
    t_max: int
    rng_seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not 1 <= self.t_min <= self.t_max:
            raise ValueError(f"need 1 <= t_min <= t_max, got [{self.t_min}, {self.t_max}]")
        self._rng = np.random.default_rng(self.rng_seed)

    def draw(self, n: int) -> np.ndarray:
        return self._rng.integers(self.t_min, self.t_max, size=n, endpoint=True)


def sample_timestep(sampler: TimestepSampler) -> int:
    return int(sampler.draw(1)[0])


def stage_sampler(sched: NoiseSchedule, t_min: int | None, seed: int) -> TimestepSampler:
    """Sampler over ``[t_min, T]``; ``t_min=None`` means the full range from 1."""
    return TimestepSampler(1 if t_min is None else t_min, sched.total_steps, seed)
