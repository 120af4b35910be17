"""Backend-agnostic DDIM machinery.

Concrete backends supply the noise model, the image encoder/decoder and,
optionally, access to the cross-attention layers. Everything else (the
inversion and denoising updates, the source-context controlled step) is
implemented here once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from ..errors import BackendFault, CapabilityError, ConfigurationError, InputError, RangeError
from ..imaging import DTYPE, FaceImage
from .schedule import NoiseSchedule, ddim_grid


@dataclass(frozen=True)
class BackendSpec:
    latent_shape: tuple[int, int, int]
    image_shape: tuple[int, int, int]
    T: int
    context_dim: int
    deterministic: bool = True
    num_steps: Optional[int] = None

    def __post_init__(self):
        dims = (*self.latent_shape, *self.image_shape, self.T)
        if any(int(d) <= 0 for d in dims) or self.context_dim < 0:
            raise ConfigurationError(f"backend dimensions must be positive: {self}")
        if self.num_steps is not None and not 1 <= self.num_steps <= self.T:
            raise ConfigurationError("num_steps must lie in [1, T]")

    @property
    def steps(self) -> int:
        return self.T if self.num_steps is None else self.num_steps


@dataclass
class LatentTensor:
    """Latent array [batch, channels, height, width] at a DDIM grid position."""

    data: torch.Tensor
    timestep: int = 0

    def __post_init__(self):
        if self.data.ndim != 4:
            raise InputError(f"latent must be 4-D, got shape {tuple(self.data.shape)}")
        if self.timestep < 0:
            raise RangeError("latent timestep must be nonnegative")

    def detach(self) -> "LatentTensor":
        return LatentTensor(self.data.detach().clone(), self.timestep)


@dataclass
class AttentionRecord:
    """Cross-attention probabilities captured during one controlled step.

    ``maps`` holds ``(layer_id, head, probs)`` with ``probs`` shaped
    [query_positions, key_positions]. The tensors stay attached to the
    autograd graph so losses on them can be differentiated.
    """

    maps: list = field(default_factory=list)
    context_dim: int = 0

    def add(self, layer_id, head: int, probs: torch.Tensor) -> None:
        self.maps.append((layer_id, head, probs))

    def __len__(self) -> int:
        return len(self.maps)


class DiffusionBackend:
    """Base class. Subclasses implement ``_noise``, ``_encode`` and ``_decode``.

    Subclasses exposing cross-attention also implement ``source_features``
    and ``_noise_with_context``.
    """

    supports_attention = False

    def __init__(self, spec: BackendSpec, schedule: NoiseSchedule):
        if schedule.T != spec.T:
            raise ConfigurationError(f"schedule has T={schedule.T}, spec says T={spec.T}")
        self.spec = spec
        self.schedule = schedule
        self.grid = ddim_grid(spec.T, spec.steps)
        self._bars = torch.tensor(schedule.alpha_bars.copy(), dtype=DTYPE)

    # -- hooks -------------------------------------------------------------
    def _noise(self, x: torch.Tensor, t: int, context) -> torch.Tensor:
        raise NotImplementedError

    def _encode(self, pixels: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def _decode(self, latent: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def source_features(self, latent: LatentTensor):
        raise CapabilityError(f"{type(self).__name__} exposes no cross-attention layers")

    def _noise_with_context(self, x: torch.Tensor, t: int, features, record: AttentionRecord) -> torch.Tensor:
        raise CapabilityError(f"{type(self).__name__} exposes no cross-attention layers")

    # -- helpers -----------------------------------------------------------
    @property
    def max_timestep(self) -> int:
        return self.spec.steps

    def schedule_index(self, position: int) -> int:
        if not 0 <= position <= self.max_timestep:
            raise RangeError(f"grid position {position} outside [0, {self.max_timestep}]")
        return int(self.grid[position])

    def _check_latent(self, latent: LatentTensor) -> None:
        if tuple(latent.data.shape[1:]) != tuple(self.spec.latent_shape):
            raise ConfigurationError(
                f"latent shape {tuple(latent.data.shape[1:])} != backend {self.spec.latent_shape}"
            )
        if latent.timestep > self.max_timestep:
            raise RangeError(f"latent timestep {latent.timestep} exceeds {self.max_timestep}")
        if not torch.isfinite(latent.data).all():
            raise InputError("latent contains non-finite values")

    def _checked(self, eps: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        if eps.shape != like.shape:
            raise ConfigurationError(f"noise model returned {tuple(eps.shape)}, expected {tuple(like.shape)}")
        if not torch.isfinite(eps).all():
            raise BackendFault("noise prediction is not finite")
        return eps

    # -- public operations ---------------------------------------------------
    def predict_noise(self, latent: LatentTensor, t: Optional[int] = None, context=None) -> torch.Tensor:
        """Noise estimate at grid position ``t`` (defaults to ``latent.timestep``)."""
        self._check_latent(latent)
        pos = latent.timestep if t is None else t
        s = self.schedule_index(pos)
        return self._checked(self._noise(latent.data, s, context), latent.data)

    def ddim_invert(self, latent: LatentTensor, steps: int) -> LatentTensor:
        self._check_latent(latent)
        if steps < 0 or latent.timestep + steps > self.max_timestep:
            raise RangeError(
                f"cannot invert {steps} steps from {latent.timestep}; schedule has {self.max_timestep}"
            )
        x = latent.data
        k = latent.timestep
        for _ in range(steps):
            s, s_next = self.schedule_index(k), self.schedule_index(k + 1)
            eps = self._checked(self._noise(x, s, None), x)
            x = ddim_invert_step(x, eps, self._bars[s], self._bars[s_next])
            k += 1
        return LatentTensor(x, k)

    def ddim_denoise(self, latent: LatentTensor, steps: int) -> LatentTensor:
        self._check_latent(latent)
        if steps < 0 or steps > latent.timestep:
            raise RangeError(f"cannot denoise {steps} steps from timestep {latent.timestep}")
        x = latent.data
        k = latent.timestep
        for _ in range(steps):
            s, s_prev = self.schedule_index(k), self.schedule_index(k - 1)
            eps = self._checked(self._noise(x, s, None), x)
            x = ddim_denoise_step(x, eps, self._bars[s], self._bars[s_prev])
            k -= 1
        return LatentTensor(x, k)

    def denoise_step_with_source_context(self, p, source_latent: LatentTensor, features=None):
        """One DDIM denoising step whose attention context is the source latent's features.

        ``p`` is a LatentTensor or anything with a ``current`` LatentTensor.
        ``features`` may carry precomputed ``source_features(source_latent)``.
        Returns the stepped latent and the attention maps used in the step.
        """
        latent = getattr(p, "current", p)
        if not self.supports_attention:
            raise CapabilityError(f"{type(self).__name__} exposes no cross-attention layers")
        self._check_latent(latent)
        self._check_latent(source_latent)
        if latent.timestep < 1:
            raise RangeError("controlled step needs a latent above timestep 0")
        if features is None:
            features = self.source_features(source_latent)
        k = latent.timestep
        s, s_prev = self.schedule_index(k), self.schedule_index(k - 1)
        record = AttentionRecord(context_dim=self.spec.context_dim)
        eps = self._checked(self._noise_with_context(latent.data, s, features, record), latent.data)
        if not record.maps:
            raise CapabilityError("no cross-attention layer was controlled in this step")
        x = ddim_denoise_step(latent.data, eps, self._bars[s], self._bars[s_prev])
        return LatentTensor(x, k - 1), record

    def vae_encode(self, image) -> LatentTensor:
        pixels = image.pixels if isinstance(image, FaceImage) else torch.as_tensor(image, dtype=DTYPE)
        if tuple(pixels.shape) != tuple(self.spec.image_shape):
            raise ConfigurationError(f"image shape {tuple(pixels.shape)} != backend {self.spec.image_shape}")
        z = self._encode(pixels.unsqueeze(0))
        if not torch.isfinite(z).all():
            raise BackendFault("encoder produced non-finite latent")
        return LatentTensor(z, 0)

    def vae_decode_tensor(self, latent: LatentTensor) -> torch.Tensor:
        """Differentiable decode to a [3, H, W] tensor clamped to [0, 1]."""
        if tuple(latent.data.shape[1:]) != tuple(self.spec.latent_shape):
            raise ConfigurationError(f"latent shape {tuple(latent.data.shape[1:])} != backend")
        if not torch.isfinite(latent.data).all():
            raise InputError("cannot decode a non-finite latent")
        return self._decode(latent.data)[0].clamp(0.0, 1.0)

    def vae_decode(self, latent: LatentTensor) -> FaceImage:
        return FaceImage(self.vae_decode_tensor(latent).detach())


def ddim_invert_step(x, eps, bar_t, bar_next):
    """x_{t+1} from x_t with the deterministic DDIM inversion update."""
    bar_t = torch.as_tensor(bar_t, dtype=x.dtype)
    bar_next = torch.as_tensor(bar_next, dtype=x.dtype)
    return x + torch.sqrt(bar_next) * (
        (torch.sqrt(1.0 / bar_t) - torch.sqrt(1.0 / bar_next)) * x
        + (torch.sqrt(1.0 / bar_next - 1.0) - torch.sqrt(1.0 / bar_t - 1.0)) * eps
    )


def ddim_denoise_step(x, eps, bar_t, bar_prev):
    """x_{t-1} from x_t with the deterministic DDIM update (no noise term)."""
    bar_t = torch.as_tensor(bar_t, dtype=x.dtype)
    bar_prev = torch.as_tensor(bar_prev, dtype=x.dtype)
    return x + torch.sqrt(bar_prev) * (
        (torch.sqrt(1.0 / bar_t) - torch.sqrt(1.0 / bar_prev)) * x
        + (torch.sqrt(1.0 / bar_prev - 1.0) - torch.sqrt(1.0 / bar_t - 1.0)) * eps
    )


def softmax_attention(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) over the last axis."""
    d = q.shape[-1]
    return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)


def as_latent(data, timestep: int = 0) -> LatentTensor:
    t = torch.as_tensor(np.asarray(data) if not torch.is_tensor(data) else data, dtype=DTYPE)
    return LatentTensor(t, timestep)
