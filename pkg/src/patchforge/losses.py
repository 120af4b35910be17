"""Loss terms driving the patch latent.

Every function accepts torch tensors or array-likes and returns a 0-d
float64 tensor, so the same code serves reporting (``float(...)``) and
backpropagation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError
from .imaging import DTYPE

DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 10.0
    lambda_attn: float = 10000.0
    lambda_dir: float = 10.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise InputError(f"{name} must be finite and nonnegative, got {value}")


@dataclass(frozen=True)
class LossReport:
    attn: float
    dir: float
    adv: float
    total: float
    epoch: int

    def as_log(self) -> dict:
        return {"l_attn": self.attn, "l_dir": self.dir, "l_adv": self.adv, "total": self.total}


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    vector = getattr(x, "vector", None)
    if vector is not None:
        return _t(vector)
    return torch.as_tensor(np.array(x, dtype=np.float64) if isinstance(x, np.ndarray) else x, dtype=DTYPE)


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a, b = a.reshape(-1), b.reshape(-1)
    return (a @ b) / (a.norm() * b.norm())


def attention_disruption_loss(record) -> torch.Tensor:
    """Variance over entries of the mean attention map.

    Maps of different sizes are bilinearly resized to the largest one
    before averaging.
    """
    maps = [m for _, _, m in getattr(record, "maps", record)]
    if not maps:
        raise InputError("attention record is empty")
    maps = [_t(m) for m in maps]
    target = max((m.shape for m in maps), key=lambda s: s[0] * s[1])
    resized = []
    for m in maps:
        if m.shape != target:
            m = F.interpolate(m[None, None], size=tuple(target), mode="bilinear", align_corners=False)[0, 0]
        resized.append(m)
    mean_map = torch.stack(resized).mean(dim=0)
    return mean_map.var(unbiased=False)


def directional_loss(p_m, p_0, enc_src, enc_tar) -> torch.Tensor:
    """1 - cos(p_m - p_0, enc_tar - enc_src); 1.0 with no gradient if either difference vanishes."""
    p_m, p_0, enc_src, enc_tar = (_t(v) for v in (p_m, p_0, enc_src, enc_tar))
    if not (p_m.numel() == p_0.numel() == enc_src.numel() == enc_tar.numel()):
        raise InputError("directional loss inputs must have the same number of entries")
    step = (p_m - p_0).reshape(-1)
    direction = (enc_tar - enc_src).reshape(-1)
    if step.norm() < DEGENERATE_NORM or direction.norm() < DEGENERATE_NORM:
        return torch.ones((), dtype=DTYPE)
    return 1.0 - _cosine(step, direction)


def _embedding_cosine(a, b) -> torch.Tensor:
    a, b = _t(a).reshape(-1), _t(b).reshape(-1)
    if a.shape != b.shape:
        raise InputError(f"embedding dimensions differ: {a.numel()} vs {b.numel()}")
    if a.norm() == 0 or b.norm() == 0:
        raise InputError("zero-norm embedding")
    return _cosine(a, b)


def adversarial_loss(emb_adv, emb_tar) -> torch.Tensor:
    return 1.0 - _embedding_cosine(emb_adv, emb_tar)


def ensemble_adversarial_loss(pairs: Sequence) -> torch.Tensor:
    """1 minus the mean cosine over (adversarial, target) embedding pairs."""
    if not pairs:
        raise InputError("ensemble loss needs at least one embedding pair")
    cosines = torch.stack([_embedding_cosine(a, b) for a, b in pairs])
    return 1.0 - cosines.mean()


def total_loss(attn, dir, adv, w: LossWeights = LossWeights()) -> torch.Tensor:
    parts = [_t(v) for v in (attn, dir, adv)]
    if not all(torch.isfinite(p).all() for p in parts):
        raise InputError("loss components must be finite")
    attn, dir, adv = parts
    return w.lambda_adv * adv + w.lambda_attn * attn + w.lambda_dir * dir
