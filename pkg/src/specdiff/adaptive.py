"""Adaptive cap on the diffusion step, driven by discriminator overfitting."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from specdiff.errors import ConfigError


@dataclass
class AdaptiveState:
    """Diffusion cap ``t_current`` plus the window of per-minibatch sign means.

    Every ``window_size`` recorded minibatches the window is averaged into the
    overfitting estimate ``r_d`` and the cap moves by ``c_step`` toward
    ``d_target``.
    """

    t_current: int = 5
    t_min: int = 5
    t_max: int = 500
    d_target: float = 0.6
    c_step: int = 1
    window_size: int = 4
    window: deque = field(default_factory=deque)

    def __post_init__(self):
        if not 1 <= self.t_min <= self.t_max:
            raise ConfigError(f"need 1 <= t_min <= t_max, got ({self.t_min}, {self.t_max})")
        if not 0 < self.d_target < 1:
            raise ConfigError(f"d_target must lie in (0, 1), got {self.d_target}")
        if self.c_step < 1 or self.window_size < 1:
            raise ConfigError("c_step and window_size must be positive")
        self.t_current = int(np.clip(self.t_current, self.t_min, self.t_max))
        self.window = deque(self.window, maxlen=self.window_size)

    def record_minibatch(self, d_train_outputs) -> float | None:
        """Push ``mean(sign(d - 0.5))``; return ``r_d`` once the window is full."""
        d = np.asarray(d_train_outputs, dtype=np.float64).ravel()
        if d.size == 0:
            raise ValueError("record_minibatch needs at least one discriminator output")
        if not np.all(np.isfinite(d)):
            raise ValueError("discriminator outputs must be finite")
        self.window.append(float(np.mean(np.sign(d - 0.5))))
        if len(self.window) < self.window_size:
            return None
        r_d = float(np.mean(self.window))
        self.window.clear()
        return r_d

    def update_t(self, r_d: float) -> int:
        if not -1.0 <= r_d <= 1.0:
            raise ValueError(f"r_d must lie in [-1, 1], got {r_d}")
        step = int(np.sign(r_d - self.d_target)) * self.c_step
        self.t_current = int(np.clip(self.t_current + step, self.t_min, self.t_max))
        return self.t_current

    def observe(self, d_train_outputs) -> float | None:
        """record_minibatch, then update_t whenever an estimate is emitted."""
        r_d = self.record_minibatch(d_train_outputs)
        if r_d is not None:
            self.update_t(r_d)
        return r_d

    def sample_t(self, rng: np.random.Generator, size=None):
        return sample_t(self.t_current, rng, size)

    def to_dict(self) -> dict:
        return {
            "t_current": self.t_current, "t_min": self.t_min, "t_max": self.t_max,
            "d_target": self.d_target, "c_step": self.c_step,
            "window_size": self.window_size, "window": list(self.window),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptiveState":
        return cls(**{**d, "window": deque(d.get("window", []))})


def step_probabilities(t_cap: int) -> np.ndarray:
    """P(t = k) = k / (t_cap (t_cap + 1) / 2) for k = 1..t_cap."""
    k = np.arange(1, t_cap + 1, dtype=np.float64)
    return k / (t_cap * (t_cap + 1) / 2)


def sample_t(t_cap: int, rng: np.random.Generator, size=None):
    if t_cap < 1:
        raise ValueError(f"diffusion cap must be >= 1, got {t_cap}")
    return rng.choice(np.arange(1, t_cap + 1), size=size, p=step_probabilities(t_cap))
