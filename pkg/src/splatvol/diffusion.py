"""Denoising-diffusion sandbox for coarse-geometry generation.

Implements the forward noising process, the MSE noise-prediction objective,
and ancestral reverse sampling over distance-field lattices.  The learned
denoiser stays a pluggable contract: any callable mapping (noisy lattice,
timestep, condition vector) to a same-shape noise prediction works.  Two
reference denoisers ship with the module: an oracle built from a known
clean lattice (which the reverse sampler must invert) and a zero predictor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DenoiserContractError, ShapeError
from .model import Bounds, default_bounds
from .gdf import GDFVolume


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule with cached cumulative signal products."""

    betas: np.ndarray       # (steps,) in (0, 1)
    alpha_bars: np.ndarray  # (steps,) strictly decreasing, in (0, 1)

    @property
    def steps(self) -> int:
        return self.betas.size


def build_schedule(steps: int, beta_start: float = 1e-4,
                   beta_end: float = 2e-2) -> DiffusionSchedule:
    if steps < 1:
        raise ConfigError("schedule needs at least one step")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(
            f"betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, steps)
    return DiffusionSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas))


def _lattice(x) -> np.ndarray:
    if isinstance(x, GDFVolume):
        return x.values
    return np.asarray(x, dtype=np.float64)


def q_sample(x0, t: int, noise: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Forward noising: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise."""
    x0 = _lattice(x0)
    noise = np.asarray(noise, dtype=np.float64)
    if not 0 <= t < schedule.steps:
        raise ConfigError(f"timestep {t} outside schedule of {schedule.steps} steps")
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {noise.shape} != lattice shape {x0.shape}")
    ab = schedule.alpha_bars[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def _checked_prediction(denoiser, x_t: np.ndarray, t: int, cond) -> np.ndarray:
    pred = np.asarray(denoiser(x_t, t, cond), dtype=np.float64)
    if pred.shape != x_t.shape:
        raise DenoiserContractError(
            f"denoiser returned shape {pred.shape} for input {x_t.shape}")
    if not np.isfinite(pred).all():
        raise DenoiserContractError("denoiser returned non-finite values")
    return pred


def mse_noise_loss(denoiser, x0, t: int, noise: np.ndarray, cond,
                   schedule: DiffusionSchedule) -> float:
    """Mean squared error between the predicted and true injected noise."""
    noise = np.asarray(noise, dtype=np.float64)
    x_t = q_sample(x0, t, noise, schedule)
    pred = _checked_prediction(denoiser, x_t, t, cond)
    return float(np.mean((pred - noise) ** 2))


def sample(denoiser, cond, schedule: DiffusionSchedule, seed: int,
           resolution: int, bounds: Bounds | None = None) -> GDFVolume:
    """Ancestral reverse sampling from pure noise down to a distance field.

    Runs in the normalized value range (distances divided by the bounds
    diagonal); the returned lattice is scaled back and clamped nonnegative.
    Deterministic for a fixed seed.
    """
    bounds = bounds if bounds is not None else default_bounds()
    rng = np.random.default_rng(seed)
    shape = (resolution, resolution, resolution)
    x = rng.standard_normal(shape)
    for t in range(schedule.steps - 1, -1, -1):
        eps = _checked_prediction(denoiser, x, t, cond)
        beta = schedule.betas[t]
        ab = schedule.alpha_bars[t]
        x = (x - beta / math.sqrt(1.0 - ab) * eps) / math.sqrt(1.0 - beta)
        if t > 0:
            x = x + math.sqrt(beta) * rng.standard_normal(shape)
    values = np.maximum(x, 0.0).ravel() * bounds.diagonal
    return GDFVolume(resolution=resolution, bounds=bounds, values=values)


def normalize_gdf(gdf: GDFVolume) -> np.ndarray:
    """Distance lattice scaled into [0, 1] by the bounds diagonal, as a
    (N, N, N) grid ready for noising."""
    return gdf.grid() / gdf.bounds.diagonal


class OracleDenoiser:
    """Predicts exactly the noise consistent with a known clean lattice.

    Reverse sampling with this denoiser must reproduce the clean lattice,
    which validates the scheduler algebra without any learned network.
    """

    def __init__(self, x0: np.ndarray, schedule: DiffusionSchedule):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.schedule = schedule

    def __call__(self, x_t: np.ndarray, t: int, cond) -> np.ndarray:
        ab = self.schedule.alpha_bars[t]
        return (x_t - math.sqrt(ab) * self.x0) / math.sqrt(1.0 - ab)


class ZeroDenoiser:
    """Predicts zero noise everywhere; handy for loss statistics."""

    def __call__(self, x_t: np.ndarray, t: int, cond) -> np.ndarray:
        return np.zeros_like(x_t)
