from .backend import (
    AttentionRecord,
    BackendSpec,
    DiffusionBackend,
    LatentTensor,
    as_latent,
    ddim_denoise_step,
    ddim_invert_step,
)
from .schedule import NoiseSchedule, ddim_grid
from .standin import LinearPredictor, StandinBackend, TinyNoiseNet, ZeroPredictor


def build_backend(kind: str = "standin", **options) -> DiffusionBackend:
    """Instantiate a backend from its ``backend.kind`` configuration value."""
    if kind == "standin":
        return StandinBackend(**options)
    if kind == "pretrained":
        from .pretrained import PretrainedBackend

        return PretrainedBackend(**options)
    from ..errors import ConfigurationError

    raise ConfigurationError(f"unknown backend kind {kind!r}")


__all__ = [
    "AttentionRecord",
    "BackendSpec",
    "DiffusionBackend",
    "LatentTensor",
    "LinearPredictor",
    "NoiseSchedule",
    "StandinBackend",
    "TinyNoiseNet",
    "ZeroPredictor",
    "as_latent",
    "build_backend",
    "ddim_denoise_step",
    "ddim_grid",
    "ddim_invert_step",
]
