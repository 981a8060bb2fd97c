"""Forward diffusion of discriminator inputs: y = sqrt(abar_t) x + sqrt(1 - abar_t) eps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from specdiff.envelope import ShapedNoiseSampler, sample_shaped_noise
from specdiff.errors import ConfigError


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def t_max_cap(self) -> int:
        return self.beta.shape[0]

    def check_step(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.t_max_cap):
            raise IndexError(f"diffusion step {t} outside [1, {self.t_max_cap}]")
        return t

    def signal_scale(self, t) -> np.ndarray:
        """sqrt(abar_t) for 1-based ``t`` (scalar or array)."""
        return np.sqrt(self.alpha_bar[self.check_step(t) - 1])

    def noise_scale(self, t) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar[self.check_step(t) - 1])


def build_schedule(t_max: int = 500, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linearly spaced betas on ``[beta_start, beta_end]``, cumulative alpha products."""
    if t_max < 1:
        raise ConfigError(f"t_max must be >= 1, got {t_max}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if t_max == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = beta_start + np.arange(t_max) / (t_max - 1) * (beta_end - beta_start)
    alpha = 1.0 - beta
    return DiffusionSchedule(beta, alpha, np.cumprod(alpha))


class NoiseSource:
    """Either i.i.d. ``N(0, sigma^2)`` noise or spectrally shaped noise."""

    def __init__(self, sigma: float | None = None, sampler: ShapedNoiseSampler | None = None):
        if (sigma is None) == (sampler is None):
            raise ConfigError("NoiseSource needs exactly one of sigma or sampler")
        if sigma is not None and sigma < 0:
            raise ConfigError("sigma must be nonnegative")
        self.sigma = sigma
        self.sampler = sampler

    @classmethod
    def standard(cls, sigma: float = 0.05) -> "NoiseSource":
        return cls(sigma=sigma)

    @classmethod
    def spec(cls, sampler: ShapedNoiseSampler) -> "NoiseSource":
        return cls(sampler=sampler)

    @property
    def variant(self) -> str:
        return "standard" if self.sampler is None else "spec"

    def draw(self, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
        if self.sampler is None:
            if self.sigma == 0:
                return np.zeros(shape)
            return self.sigma * rng.standard_normal(shape)
        return sample_shaped_noise(self.sampler, shape[-1], rng, batch=tuple(shape[:-1]))


def diffuse(x, t, sched: DiffusionSchedule, noise: NoiseSource, rng: np.random.Generator,
            eps: np.ndarray | None = None) -> np.ndarray:
    """Perturb ``x`` (last axis = time) to diffusion step ``t``.

    ``t`` may be a scalar or one step per leading-axis element. Pass ``eps``
    to reuse a specific noise realization.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("diffuse input must be finite")
    t = sched.check_step(t)
    if eps is None:
        eps = noise.draw(x.shape, rng)
    a = sched.signal_scale(t)[..., None] if t.ndim else sched.signal_scale(t)
    b = sched.noise_scale(t)[..., None] if t.ndim else sched.noise_scale(t)
    return a * x + b * eps
