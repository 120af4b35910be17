"""Adapter around a Stable Diffusion checkpoint loaded through ``diffusers``.

Requires the optional ``diffusers`` dependency. The source-context control
hooks the U-Net's spatial attention layers (``attn1``): during a
controlled step their keys and values are computed from the source
latent's hidden states instead of the patch's own.
"""

from __future__ import annotations

import os
from typing import Iterable, Optional

import torch

from ..errors import CapabilityError, ConfigurationError
from ..imaging import DTYPE
from .backend import AttentionRecord, BackendSpec, DiffusionBackend, LatentTensor
from .schedule import NoiseSchedule


class _ControlProcessor:
    def __init__(self, owner: "PretrainedBackend", name: str):
        self.owner = owner
        self.name = name

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, **kwargs):
        owner = self.owner
        if owner.mode == "capture":
            owner.captured[self.name] = hidden_states.detach()
        context = hidden_states
        controlled = owner.mode == "control" and self.name in owner.features
        if controlled:
            context = owner.features[self.name].to(hidden_states.dtype)
        q = attn.head_to_batch_dim(attn.to_q(hidden_states))
        k = attn.head_to_batch_dim(attn.to_k(context))
        v = attn.head_to_batch_dim(attn.to_v(context))
        probs = attn.get_attention_scores(q, k, None)
        if controlled and owner.record is not None:
            b = hidden_states.shape[0]
            per_head = probs.view(b, attn.heads, *probs.shape[1:]).mean(dim=0)
            for head in range(attn.heads):
                owner.record.add(self.name, head, per_head[head].to(DTYPE))
        out = attn.batch_to_head_dim(torch.bmm(probs, v))
        out = attn.to_out[0](out)
        return attn.to_out[1](out)


class PretrainedBackend(DiffusionBackend):
    supports_attention = True

    def __init__(self, checkpoint: str, num_steps: int = 50, layers: Optional[Iterable[str]] = None,
                 device: str = "cpu", cache_dir: Optional[str] = None):
        try:
            from diffusers import StableDiffusionPipeline
        except ImportError as exc:  # pragma: no cover - depends on optional extra
            raise CapabilityError("backend.kind=pretrained needs the 'diffusers' package") from exc
        cache_dir = cache_dir or os.environ.get("PATCHFORGE_CACHE")
        pipe = StableDiffusionPipeline.from_pretrained(checkpoint, cache_dir=cache_dir, safety_checker=None)
        pipe = pipe.to(device)
        self.pipe = pipe
        self.unet = pipe.unet.requires_grad_(False)
        self.vae = pipe.vae.requires_grad_(False)
        self.device = device
        with torch.no_grad():
            tok = pipe.tokenizer([""], padding="max_length", max_length=pipe.tokenizer.model_max_length,
                                 return_tensors="pt")
            self.null_text = pipe.text_encoder(tok.input_ids.to(device))[0]
        schedule = NoiseSchedule(pipe.scheduler.betas.double().cpu().numpy())
        size = pipe.unet.config.sample_size
        factor = 2 ** (len(pipe.vae.config.block_out_channels) - 1)
        spec = BackendSpec(
            latent_shape=(pipe.unet.config.in_channels, size, size),
            image_shape=(3, size * factor, size * factor),
            T=schedule.T,
            context_dim=pipe.unet.config.attention_head_dim if isinstance(
                pipe.unet.config.attention_head_dim, int) else 64,
            deterministic=False,
            num_steps=num_steps,
        )
        super().__init__(spec, schedule)
        names = [n for n in self.unet.attn_processors if n.endswith("attn1.processor")]
        wanted = set(layers) if layers is not None else set(names)
        unknown = wanted - set(names)
        if unknown:
            raise ConfigurationError(f"unknown attention layers: {sorted(unknown)}")
        self.mode = "plain"
        self.captured: dict = {}
        self.features: dict = {}
        self.record: Optional[AttentionRecord] = None
        procs = {}
        for name, proc in self.unet.attn_processors.items():
            procs[name] = _ControlProcessor(self, name) if name in wanted else proc
        self.unet.set_attn_processor(procs)
        self.scaling = pipe.vae.config.scaling_factor

    def _run(self, x, t):
        dtype = self.unet.dtype
        out = self.unet(x.to(self.device, dtype), t, encoder_hidden_states=self.null_text).sample
        return out.to(DTYPE).cpu() if x.device.type == "cpu" else out.to(DTYPE)

    def _noise(self, x, t, context):
        self.mode = "plain"
        return self._run(x, t)

    def source_features(self, latent: LatentTensor):
        self._check_latent(latent)
        self.mode, self.captured = "capture", {}
        try:
            with torch.no_grad():
                self._run(latent.data, self.schedule_index(latent.timestep))
        finally:
            self.mode = "plain"
        return dict(self.captured)

    def _noise_with_context(self, x, t, features, record):
        self.mode, self.features, self.record = "control", features, record
        try:
            return self._run(x, t)
        finally:
            self.mode, self.features, self.record = "plain", {}, None

    def _encode(self, pixels):
        dist = self.vae.encode((2.0 * pixels - 1.0).to(self.device, self.vae.dtype)).latent_dist
        return (dist.mean * self.scaling).to(DTYPE).cpu()

    def _decode(self, latent):
        img = self.vae.decode((latent / self.scaling).to(self.device, self.vae.dtype)).sample
        return ((img + 1.0) / 2.0).to(DTYPE).cpu()
