"""Deterministic desk-scale backends.

The encoder/decoder pair is a space-to-depth rearrangement, so decode is
the exact inverse of encode and a constant image maps to a constant
latent. The default noise model is a seeded two-scale network whose
attention layers take their keys and values from a context feature map;
with no context each layer attends to its own input.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import CapabilityError, ConfigurationError
from ..imaging import DTYPE
from .backend import AttentionRecord, BackendSpec, DiffusionBackend, LatentTensor, softmax_attention
from .schedule import NoiseSchedule


def timestep_embedding(t: int, dim: int) -> torch.Tensor:
    half = max(dim // 2, 1)
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half)
    ang = float(t) * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)])
    return emb[:dim] if emb.numel() >= dim else F.pad(emb, (0, dim - emb.numel()))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int, head_dim: int):
        super().__init__()
        self.heads = heads
        self.head_dim = head_dim
        inner = heads * head_dim
        self.to_q = nn.Linear(dim, inner, bias=False)
        self.to_k = nn.Linear(dim, inner, bias=False)
        self.to_v = nn.Linear(dim, inner, bias=False)
        self.to_out = nn.Linear(inner, dim)

    def forward(self, tokens: torch.Tensor, context: torch.Tensor):
        b, n, _ = tokens.shape
        m = context.shape[1]
        q = self.to_q(tokens).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(context).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(context).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        probs = softmax_attention(q, k)
        out = (probs @ v).transpose(1, 2).reshape(b, n, self.heads * self.head_dim)
        return self.to_out(out), probs


class TinyNoiseNet(nn.Module):
    """Two-scale attention network standing in for a U-Net noise predictor.

    Layer ``l`` runs on the feature map average-pooled by ``2**l``; its
    input tokens are the per-layer features exposed as phi(x).
    """

    def __init__(self, channels: int, hidden: int = 16, heads: int = 2, head_dim: int = 8,
                 layers: int = 2, out_scale: float = 0.1, qk_scale: float = 1.0):
        super().__init__()
        self.hidden = hidden
        self.inp = nn.Conv2d(channels, hidden, 1)
        self.time = nn.Linear(hidden, hidden)
        self.attn = nn.ModuleList(CrossAttention(hidden, heads, head_dim) for _ in range(layers))
        self.out = nn.Conv2d(hidden, channels, 1)
        with torch.no_grad():
            for block in self.attn:
                block.to_q.weight.mul_(qk_scale)
                block.to_k.weight.mul_(qk_scale)
            self.out.weight.mul_(out_scale)
            self.out.bias.mul_(out_scale)

    @property
    def num_layers(self) -> int:
        return len(self.attn)

    def _tokens(self, h: torch.Tensor, layer: int) -> torch.Tensor:
        if layer:
            h = F.avg_pool2d(h, 2 ** layer)
        return h.flatten(2).transpose(1, 2)

    def forward(self, x: torch.Tensor, t: int, context: Optional[dict] = None,
                record: Optional[AttentionRecord] = None, capture: Optional[dict] = None):
        b, _, hgt, wid = x.shape
        h = torch.tanh(self.inp(x) + self.time(timestep_embedding(t, self.hidden).to(x.dtype))[None, :, None, None])
        for layer, block in enumerate(self.attn):
            tokens = self._tokens(h, layer)
            if capture is not None:
                capture[layer] = tokens
            ctx = tokens if context is None or layer not in context else context[layer]
            out, probs = block(tokens, ctx)
            if record is not None and context is not None and layer in context:
                mean_probs = probs.mean(dim=0)
                for head in range(mean_probs.shape[0]):
                    record.add(layer, head, mean_probs[head])
            grid = out.transpose(1, 2).reshape(b, self.hidden, hgt // 2 ** layer, wid // 2 ** layer)
            if layer:
                grid = F.interpolate(grid, size=(hgt, wid), mode="nearest")
            h = h + grid
        return self.out(torch.tanh(h))


class ZeroPredictor:
    """Noise model that always predicts zero."""

    def __call__(self, x: torch.Tensor, t: int, context=None) -> torch.Tensor:
        return torch.zeros_like(x)


class LinearPredictor:
    """Noise model ``eps = M @ flatten(x)`` for a fixed square matrix M."""

    def __init__(self, matrix):
        self.matrix = torch.as_tensor(matrix, dtype=DTYPE)

    def __call__(self, x: torch.Tensor, t: int, context=None) -> torch.Tensor:
        flat = x.reshape(x.shape[0], -1)
        if self.matrix.shape != (flat.shape[1], flat.shape[1]):
            raise ConfigurationError(f"matrix {tuple(self.matrix.shape)} does not fit latent size {flat.shape[1]}")
        return (flat @ self.matrix.T).reshape(x.shape)


class StandinBackend(DiffusionBackend):
    """Seeded tiny backend with an exact-inverse encoder/decoder pair.

    Defaults mimic a latent diffusion setup at toy size: a 1000-step
    linear schedule sampled on a 50-step DDIM grid, noise predictions of
    roughly unit scale, and attention sharp enough for its variance to
    register. ``predictor`` overrides the noise model with any callable
    ``(x, t, context) -> eps``; such backends have no attention layers.
    """

    def __init__(self, image_size: int = 16, factor: int = 2, T: int = 1000,
                 schedule: Optional[NoiseSchedule] = None, num_steps: Optional[int] = None,
                 predictor: Optional[Callable] = None, seed: int = 0, hidden: int = 16,
                 heads: int = 2, head_dim: int = 8, layers: int = 2, out_scale: float = 3.0,
                 qk_scale: float = 4.0, controlled_layers: Optional[Iterable[int]] = None):
        if image_size % (factor * 2 ** max(layers - 1, 0)):
            raise ConfigurationError("image_size must be divisible by factor * 2**(layers-1)")
        schedule = schedule or NoiseSchedule.linear(T)
        if num_steps is None and schedule.T >= 50 and schedule.T % 50 == 0:
            num_steps = 50
        channels = 3 * factor * factor
        side = image_size // factor
        attention = predictor is None and layers > 0
        spec = BackendSpec(
            latent_shape=(channels, side, side),
            image_shape=(3, image_size, image_size),
            T=schedule.T,
            context_dim=head_dim if attention else 0,
            deterministic=True,
            num_steps=num_steps,
        )
        super().__init__(spec, schedule)
        self.factor = factor
        self.seed = seed
        if predictor is None:
            with torch.random.fork_rng():
                torch.manual_seed(seed)
                self.net = TinyNoiseNet(channels, hidden, heads, head_dim, layers, out_scale, qk_scale).to(DTYPE)
            self.net.requires_grad_(False)
            self.predictor = None
        else:
            self.net = None
            self.predictor = predictor
        self.supports_attention = attention
        all_layers = set(range(layers)) if attention else set()
        chosen = all_layers if controlled_layers is None else set(controlled_layers)
        if not chosen <= all_layers:
            raise ConfigurationError(f"controlled layers {sorted(chosen - all_layers)} do not exist")
        self.controlled_layers = chosen

    def _noise(self, x, t, context):
        if self.net is None:
            return self.predictor(x, t, context)
        return self.net(x, t, context=context)

    def _encode(self, pixels):
        return F.pixel_unshuffle(pixels, self.factor)

    def _decode(self, latent):
        return F.pixel_shuffle(latent, self.factor)

    def source_features(self, latent: LatentTensor) -> dict:
        """Per-layer input tokens of the network run on ``latent`` at its own timestep."""
        if not self.supports_attention:
            raise CapabilityError("this stand-in has no attention layers")
        self._check_latent(latent)
        capture: dict = {}
        self.net(latent.data, self.schedule_index(latent.timestep), capture=capture)
        return {layer: capture[layer].detach() for layer in self.controlled_layers}

    def _noise_with_context(self, x, t, features, record):
        return self.net(x, t, context=features, record=record)
