"""Semantic adversarial patches for face recognition impersonation.

A patch is optimised in the latent space of a diffusion model, steered by
the source face through self-attention, and applied to the face by a
renderer. The target recognition system is only queried for embeddings.
"""

from .attack import AttackConfig, AttackResult, PatchState, attack_epoch, finalize_patch, init_patch, run_attack
from .diffusion import DiffusionBackend, LatentTensor, StandinBackend, build_backend
from .errors import (
    BackendFault,
    CalibrationError,
    CapabilityError,
    ConfigurationError,
    DatasetError,
    DetectionError,
    EnsembleError,
    InputError,
    MapIntegrityError,
    PatchforgeError,
    ProtocolError,
    RangeError,
    TransportError,
)
from .imaging import FaceImage, load_image, save_image
from .losses import LossReport, LossWeights
from .oracle import (
    Embedding,
    FRDecision,
    LinearOracle,
    QueryLog,
    RemoteOracle,
    calibrate_threshold,
    cosine_similarity,
    remote_embed,
    verify,
)
from .render import PatchRegion, Renderer, render

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackResult", "BackendFault", "CalibrationError", "CapabilityError",
    "ConfigurationError", "DatasetError", "DetectionError", "DiffusionBackend", "Embedding",
    "EnsembleError", "FRDecision", "FaceImage", "InputError", "LatentTensor", "LinearOracle",
    "LossReport", "LossWeights", "MapIntegrityError", "PatchRegion", "PatchState", "PatchforgeError",
    "ProtocolError", "QueryLog", "RangeError", "RemoteOracle", "Renderer", "StandinBackend",
    "TransportError", "attack_epoch", "build_backend", "calibrate_threshold", "cosine_similarity",
    "finalize_patch", "init_patch", "load_image", "remote_embed", "render", "run_attack", "save_image",
    "verify",
]
