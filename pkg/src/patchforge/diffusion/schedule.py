from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, RangeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule with the clean sample at index 0.

    ``betas[i]`` is beta_{i+1}; ``alpha_bars`` has length T + 1 and
    ``alpha_bars[0] == 1`` so that timestep 0 is the data itself.
    """

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).reshape(-1)
        if betas.size == 0:
            raise ConfigurationError("schedule needs at least one timestep")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ConfigurationError("every beta must lie strictly inside (0, 1)")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        bars = np.empty(betas.size + 1, dtype=np.float64)
        bars[0] = 1.0
        for i, a in enumerate(alphas, start=1):
            bars[i] = bars[i - 1] * a
        bars.setflags(write=False)
        object.__setattr__(self, "alpha_bars", bars)

    @classmethod
    def linear(cls, T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        if T < 1:
            raise ConfigurationError("T must be positive")
        if T == 1:
            return cls(np.array([beta_start]))
        return cls(np.linspace(beta_start, beta_end, T))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise RangeError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bars[t])


def ddim_grid(T: int, num_steps: int) -> np.ndarray:
    """Schedule indices visited by a DDIM sampler with ``num_steps`` uniform strides.

    Grid position k maps to schedule index round(k * T / num_steps).
    """
    if not 1 <= num_steps <= T:
        raise ConfigurationError(f"num_steps must lie in [1, {T}], got {num_steps}")
    return np.rint(np.arange(num_steps + 1) * (T / num_steps)).astype(np.int64)
