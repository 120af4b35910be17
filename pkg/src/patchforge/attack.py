"""Latent-space patch optimisation against a face recognition oracle.

The patch lives in the diffusion latent space. It starts as a blend of the
inverted source and target latents; every epoch denoises it one step with
the source face as attention context, scores the result, and takes a
plain gradient step on the pre-step latent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import torch

from .diffusion import DiffusionBackend, LatentTensor
from .errors import CapabilityError, ConfigurationError, InputError
from .imaging import DTYPE, FaceImage
from .losses import (
    LossReport,
    LossWeights,
    attention_disruption_loss,
    directional_loss,
    ensemble_adversarial_loss,
    total_loss,
)
from .oracle import Embedding, FRDecision, Oracle
from .render import Renderer

log = logging.getLogger(__name__)

GRAD_MODES = ("analytic", "zeroth_order")


@dataclass(frozen=True)
class AttackConfig:
    N: int = 200
    eta: float = 0.01
    alpha: float = 0.5
    invert_steps: int = 5
    weights: LossWeights = field(default_factory=LossWeights)
    grad_mode: str = "analytic"
    zo_samples: int = 8
    zo_sigma: float = 1e-2
    seed: int = 0
    threshold: float = 0.8
    decode_direct: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise ConfigurationError("N must be at least 1")
        if not self.eta > 0:
            raise ConfigurationError("eta must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if self.invert_steps < 1:
            raise ConfigurationError("invert_steps must be at least 1")
        if self.grad_mode not in GRAD_MODES:
            raise ConfigurationError(f"grad_mode must be one of {GRAD_MODES}")
        if self.zo_samples < 1 or not self.zo_sigma > 0:
            raise ConfigurationError("zeroth-order mode needs zo_samples >= 1 and zo_sigma > 0")


@dataclass(frozen=True)
class PatchState:
    p0: LatentTensor
    current: LatentTensor
    epoch: int = 0

    def __post_init__(self):
        if self.current.data.shape != self.p0.data.shape:
            raise InputError("patch latent changed shape")


@dataclass
class AttackContext:
    source: FaceImage
    source_latent: LatentTensor
    enc_src: torch.Tensor
    enc_tar: torch.Tensor
    targets: list
    backend: DiffusionBackend
    renderer: Renderer
    oracles: list
    cfg: AttackConfig
    features: Optional[dict] = None


@dataclass
class AttackResult:
    success: bool
    nq: int
    epochs_used: int
    similarity_trace: list
    loss_trace: list
    query_trace: list
    final_patch: FaceImage
    final_adv_face: FaceImage
    evaluated_adv_face: Optional[FaceImage] = None

    def summary(self) -> dict:
        return {
            "success": self.success,
            "nq": self.nq,
            "epochs_used": self.epochs_used,
            "final_similarity": self.similarity_trace[-1] if self.similarity_trace else None,
        }


def _oracles(oracle) -> list:
    members = list(oracle) if isinstance(oracle, (list, tuple)) else [oracle]
    if not members:
        raise InputError("at least one oracle is required")
    return members


def _queries(oracles: Sequence[Oracle]) -> int:
    return sum(o.queries for o in oracles)


def _prepare(x: FaceImage, x_tar: FaceImage, cfg: AttackConfig, backend: DiffusionBackend):
    enc_src = backend.vae_encode(x)
    enc_tar = backend.vae_encode(x_tar)
    with torch.no_grad():
        x_t = backend.ddim_invert(enc_src, cfg.invert_steps)
        x_t_tar = backend.ddim_invert(enc_tar, cfg.invert_steps)
        p0 = LatentTensor((1.0 - cfg.alpha) * x_t.data + cfg.alpha * x_t_tar.data, x_t.timestep)
    state = PatchState(p0=p0.detach(), current=p0.detach(), epoch=0)
    return state, x_t.detach(), enc_src.data.detach(), enc_tar.data.detach()


def init_patch(x: FaceImage, x_tar: FaceImage, cfg: AttackConfig, backend: DiffusionBackend) -> PatchState:
    """Blend the inverted source and target latents with weight ``cfg.alpha`` on the target."""
    return _prepare(x, x_tar, cfg, backend)[0]


def make_context(x: FaceImage, x_tar: FaceImage, cfg: AttackConfig, backend: DiffusionBackend,
                 renderer: Renderer, oracle) -> tuple[PatchState, AttackContext]:
    """Initial state plus everything an epoch needs. Queries each oracle once for the target."""
    oracles = _oracles(oracle)
    if cfg.grad_mode == "analytic" and not all(hasattr(o, "embed_tensor") for o in oracles):
        raise CapabilityError("analytic gradients need differentiable oracles; use grad_mode='zeroth_order'")
    state, x_t, enc_src, enc_tar = _prepare(x, x_tar, cfg, backend)
    targets = [o.embed(x_tar, purpose="target") for o in oracles]
    ctx = AttackContext(
        source=x,
        source_latent=x_t,
        enc_src=enc_src,
        enc_tar=enc_tar,
        targets=targets,
        backend=backend,
        renderer=renderer,
        oracles=oracles,
        cfg=cfg,
        features=backend.source_features(x_t) if backend.supports_attention else None,
    )
    return state, ctx


def _forward(ctx: AttackContext, latent: LatentTensor):
    """Controlled denoise step, decode and render. Returns (stepped, record, adv pixels)."""
    stepped, record = ctx.backend.denoise_step_with_source_context(latent, ctx.source_latent, ctx.features)
    patch = ctx.backend.vae_decode_tensor(stepped)
    adv = ctx.renderer.render_tensor(ctx.source, patch)
    return stepped, record, adv


def _black_box_similarity(ctx: AttackContext, adv: torch.Tensor, purpose: str) -> float:
    face = FaceImage(adv.detach().clamp(0.0, 1.0))
    cosines = [float(o.embed(face, purpose).vector @ t.vector) for o, t in zip(ctx.oracles, ctx.targets)]
    return sum(cosines) / len(cosines)


def estimate_black_box_gradient(loss_at: Callable[[torch.Tensor], float], p: torch.Tensor, k: int,
                                sigma: float, seed: int) -> torch.Tensor:
    """Antithetic Gaussian estimate of the gradient of ``loss_at`` at ``p``.

    Uses exactly ``2 * k`` evaluations of ``loss_at``.
    """
    if k < 1 or not sigma > 0:
        raise InputError("need k >= 1 and sigma > 0")
    p = p.detach()
    gen = torch.Generator().manual_seed(int(seed))
    grad = torch.zeros_like(p, dtype=DTYPE)
    for _ in range(k):
        u = torch.randn(p.shape, generator=gen, dtype=DTYPE)
        diff = float(loss_at(p + sigma * u)) - float(loss_at(p - sigma * u))
        grad += diff * u
    return grad / (2.0 * k * sigma)


def _local_terms(ctx: AttackContext, state: PatchState, p: torch.Tensor):
    """Stepped latent, L_attn, L_dir and the rendered face for pre-step latent ``p``."""
    stepped, record, adv = _forward(ctx, LatentTensor(p, state.current.timestep))
    l_attn = attention_disruption_loss(record)
    l_dir = directional_loss(stepped.data, state.p0.data, ctx.enc_src, ctx.enc_tar)
    return l_attn, l_dir, adv


def epoch_objective(state: PatchState, ctx: AttackContext, p: torch.Tensor):
    """Full weighted objective at pre-step latent ``p`` with differentiable oracles.

    Returns ``(total, l_attn, l_dir, l_adv)``. Costs one query per oracle.
    """
    l_attn, l_dir, adv = _local_terms(ctx, state, p)
    embs = [o.embed_tensor(adv) for o in ctx.oracles]
    targets = [torch.as_tensor(t.vector.copy(), dtype=DTYPE) for t in ctx.targets]
    l_adv = ensemble_adversarial_loss(list(zip(embs, targets)))
    return total_loss(l_attn, l_dir, l_adv, ctx.cfg.weights), l_attn, l_dir, l_adv


def attack_epoch(state: PatchState, ctx: AttackContext) -> tuple[PatchState, LossReport, FRDecision]:
    """One optimisation epoch. Raises without touching ``state`` if a query fails."""
    cfg, w = ctx.cfg, ctx.cfg.weights
    p = state.current.data.detach().clone().requires_grad_(True)

    if cfg.grad_mode == "analytic":
        total, l_attn, l_dir, l_adv = epoch_objective(state, ctx, p)
        similarity = 1.0 - float(l_adv.detach())
        (grad,) = torch.autograd.grad(total, p)
    else:
        l_attn, l_dir, adv = _local_terms(ctx, state, p)
        similarity = _black_box_similarity(ctx, adv, "adv")
        l_adv = torch.tensor(1.0 - similarity, dtype=DTYPE)
        total = total_loss(l_attn, l_dir, l_adv, w)
        local = w.lambda_attn * l_attn + w.lambda_dir * l_dir
        grad = torch.autograd.grad(local, p, allow_unused=True)[0] if local.requires_grad else None
        grad = torch.zeros_like(p) if grad is None else grad

        def adv_loss_at(q: torch.Tensor) -> float:
            with torch.no_grad():
                _, _, probe = _forward(ctx, LatentTensor(q, state.current.timestep))
                return 1.0 - _black_box_similarity(ctx, probe, "probe")

        seed = cfg.seed * 1_000_003 + state.epoch
        grad = grad + w.lambda_adv * estimate_black_box_gradient(adv_loss_at, p, cfg.zo_samples, cfg.zo_sigma, seed)

    decision = FRDecision(similarity, cfg.threshold, similarity >= cfg.threshold)
    report = LossReport(*(float(v.detach()) for v in (l_attn, l_dir, l_adv, total)), state.epoch + 1)
    new = LatentTensor(p.detach() - cfg.eta * grad.detach(), state.current.timestep)
    return replace(state, current=new, epoch=state.epoch + 1), report, decision


def finalize_patch(state: PatchState, backend: DiffusionBackend, cfg: AttackConfig) -> FaceImage:
    """Pixel-space patch: fully denoise then decode, or decode directly with ``decode_direct``."""
    latent = state.current.detach()
    with torch.no_grad():
        if not cfg.decode_direct:
            latent = backend.ddim_denoise(latent, latent.timestep)
        return backend.vae_decode(latent)


def run_attack(x: FaceImage, x_tar: FaceImage, cfg: AttackConfig, backend: DiffusionBackend,
               renderer: Renderer, oracle, on_epoch: Optional[Callable] = None) -> AttackResult:
    """Optimise until the oracle verifies the patched face as the target or N epochs pass.

    ``on_epoch(report, decision, queries_so_far)`` is called after every epoch.
    On success the final patch comes from the latent that achieved the match.
    """
    oracles = _oracles(oracle)
    start = _queries(oracles)
    state, ctx = make_context(x, x_tar, cfg, backend, renderer, oracles)
    sims, losses, queries = [], [], []
    evaluated = state
    success = False
    while state.epoch < cfg.N:
        evaluated = state
        state, report, decision = attack_epoch(state, ctx)
        sims.append(decision.similarity)
        losses.append(report)
        queries.append(_queries(oracles) - start)
        if on_epoch is not None:
            on_epoch(report, decision, queries[-1])
        if decision.match:
            success = True
            break
    final_state = evaluated if success else state
    with torch.no_grad():
        _, _, adv = _forward(ctx, final_state.current)
    patch = finalize_patch(final_state, backend, cfg)
    log.info("attack finished: success=%s epochs=%d nq=%d", success, state.epoch, queries[-1])
    return AttackResult(
        success=success,
        nq=_queries(oracles) - start,
        epochs_used=state.epoch,
        similarity_trace=sims,
        loss_trace=losses,
        query_trace=queries,
        final_patch=patch,
        final_adv_face=renderer(x, patch),
        evaluated_adv_face=FaceImage(adv.detach().clamp(0.0, 1.0), x.identity),
    )
