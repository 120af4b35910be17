"""Black-box face recognition oracles and verification helpers.

Every oracle meters its queries in a :class:`QueryLog`. Only completed
queries are counted; a call that fails in transport leaves the count
untouched.
"""

from __future__ import annotations

import base64
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import requests
import torch

from .errors import (
    CalibrationError,
    EnsembleError,
    InputError,
    PatchforgeError,
    ProtocolError,
    TransportError,
)
from .imaging import DTYPE, FaceImage, encode_png

log = logging.getLogger(__name__)

NORM_TOL = 1e-6


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    model_id: str = "unknown"

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if v.size == 0 or not np.all(np.isfinite(v)):
            raise InputError("embedding must be a finite, nonempty vector")
        if abs(np.linalg.norm(v) - 1.0) > NORM_TOL:
            raise InputError("embedding must have unit norm")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return int(self.vector.size)

    @classmethod
    def from_raw(cls, raw, model_id: str = "unknown") -> "Embedding":
        v = np.asarray(raw, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ProtocolError("embedding contains non-finite values")
        n = np.linalg.norm(v)
        if n == 0.0:
            raise ProtocolError("embedding has zero norm")
        return cls(v / n, model_id)


@dataclass(frozen=True)
class QueryRecord:
    timestamp: float
    model_id: str
    purpose: str


@dataclass
class QueryLog:
    """Thread-safe query counter with per-call records."""

    records: list = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def count(self) -> int:
        with self._lock:
            return len(self.records)

    def add(self, model_id: str, purpose: str = "query") -> None:
        with self._lock:
            self.records.append(QueryRecord(time.time(), model_id, purpose))

    def reset(self) -> None:
        with self._lock:
            self.records.clear()


@dataclass(frozen=True)
class FRDecision:
    similarity: float
    threshold: float
    match: bool


class Oracle:
    """Base class: subclasses implement ``_raw(image) -> array``."""

    def __init__(self, model_id: str):
        self.model_id = model_id
        self.log = QueryLog()

    @property
    def queries(self) -> int:
        return self.log.count

    def _raw(self, image: FaceImage) -> np.ndarray:
        raise NotImplementedError

    def embed(self, image: FaceImage, purpose: str = "query") -> Embedding:
        emb = Embedding.from_raw(self._raw(image), self.model_id)
        self.log.add(self.model_id, purpose)
        return emb


class LinearOracle(Oracle):
    """Differentiable stand-in: ``normalize(M @ flatten(image))``."""

    differentiable = True

    def __init__(self, matrix, model_id: str = "linear"):
        super().__init__(model_id)
        self.matrix = torch.as_tensor(matrix, dtype=DTYPE)
        if self.matrix.ndim != 2:
            raise InputError("oracle matrix must be 2-D")

    @classmethod
    def from_seed(cls, image_shape: Sequence[int], dim: int = 32, seed: int = 0,
                  centered: bool = True, pixel_weights=None, model_id: Optional[str] = None) -> "LinearOracle":
        """Gaussian projection.

        ``pixel_weights`` (broadcastable to ``image_shape``) scales each
        pixel's columns; ``centered`` then makes the map blind to a global
        brightness offset.
        """
        n = int(np.prod(image_shape))
        gen = torch.Generator().manual_seed(seed)
        m = torch.randn(dim, n, generator=gen, dtype=DTYPE) / math.sqrt(n)
        if pixel_weights is not None:
            wts = torch.broadcast_to(torch.as_tensor(pixel_weights, dtype=DTYPE), tuple(image_shape))
            m = m * wts.reshape(1, -1)
        if centered:
            m = m - m.mean(dim=1, keepdim=True)
        return cls(m, model_id or f"linear-{seed}")

    def embed_tensor(self, pixels: torch.Tensor, purpose: str = "query") -> torch.Tensor:
        """Unit-norm embedding as a tensor attached to the autograd graph. Metered."""
        flat = pixels.reshape(-1).to(DTYPE)
        if flat.numel() != self.matrix.shape[1]:
            raise InputError(f"image has {flat.numel()} values, oracle expects {self.matrix.shape[1]}")
        raw = self.matrix @ flat
        n = raw.norm()
        if not torch.isfinite(raw).all() or n == 0:
            raise ProtocolError("oracle produced a degenerate embedding")
        self.log.add(self.model_id, purpose)
        return raw / n

    def _raw(self, image: FaceImage) -> np.ndarray:
        flat = image.pixels.reshape(-1)
        if flat.numel() != self.matrix.shape[1]:
            raise InputError(f"image has {flat.numel()} values, oracle expects {self.matrix.shape[1]}")
        return (self.matrix @ flat).detach().numpy()


class RemoteOracle(Oracle):
    """Client for the JSON embedding service (``POST /v1/embed``)."""

    def __init__(self, endpoint: str, model: str = "default", dim: Optional[int] = None,
                 attempts: int = 3, backoff: float = 0.5, timeout: float = 10.0,
                 session: Optional[requests.Session] = None):
        super().__init__(model)
        base = endpoint.rstrip("/")
        self.url = base if base.endswith("/v1/embed") else base + "/v1/embed"
        self.dim = dim
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.Session()

    def _post(self, body: dict) -> requests.Response:
        delay = self.backoff
        last: Optional[Exception] = None
        for attempt in range(1, self.attempts + 1):
            try:
                resp = self.session.post(self.url, json=body, timeout=self.timeout)
            except requests.RequestException as exc:
                last = exc
            else:
                if resp.status_code < 500:
                    return resp
                last = TransportError(f"HTTP {resp.status_code}")
            log.warning("embedding request attempt %d/%d failed: %s", attempt, self.attempts, last)
            if attempt < self.attempts:
                time.sleep(delay)
                delay *= 2
        raise TransportError(f"embedding service unreachable after {self.attempts} attempts: {last}")

    def _raw(self, image: FaceImage) -> np.ndarray:
        body = {"image_png_b64": base64.b64encode(encode_png(image)).decode("ascii"), "model": self.model_id}
        resp = self._post(body)
        try:
            payload = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"response is not JSON (HTTP {resp.status_code})") from exc
        if resp.status_code != 200:
            msg = payload.get("error") if isinstance(payload, dict) else None
            raise ProtocolError(f"service rejected request (HTTP {resp.status_code}): {msg}")
        return parse_embed_response(payload, self.model_id, self.dim)


def parse_embed_response(payload, model: Optional[str] = None, dim: Optional[int] = None) -> np.ndarray:
    if not isinstance(payload, dict):
        raise ProtocolError("response must be a JSON object")
    vec, n = payload.get("embedding"), payload.get("dim")
    if not isinstance(vec, list) or not vec:
        raise ProtocolError("'embedding' must be a nonempty list")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vec):
        raise ProtocolError("'embedding' must contain numbers only")
    if not isinstance(n, int) or isinstance(n, bool) or n != len(vec):
        raise ProtocolError(f"'dim' {n!r} does not match embedding length {len(vec)}")
    if dim is not None and n != dim:
        raise ProtocolError(f"expected dimension {dim}, service returned {n}")
    if model is not None and payload.get("model") != model:
        raise ProtocolError(f"expected model {model!r}, service answered {payload.get('model')!r}")
    arr = np.asarray(vec, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ProtocolError("embedding contains non-finite values")
    return arr


def remote_embed(endpoint, image: FaceImage, **kwargs) -> Embedding:
    """Embed through the wire protocol. ``endpoint`` may be a URL or a RemoteOracle."""
    oracle = endpoint if isinstance(endpoint, RemoteOracle) else RemoteOracle(endpoint, **kwargs)
    return oracle.embed(image)


def cosine_similarity(a: Embedding, b: Embedding) -> float:
    if a.dim != b.dim:
        raise InputError(f"embedding dimensions differ: {a.dim} vs {b.dim}")
    return float(np.clip(a.vector @ b.vector, -1.0, 1.0))


def verify(a: Embedding, b: Embedding, threshold: float) -> FRDecision:
    sim = cosine_similarity(a, b)
    return FRDecision(sim, float(threshold), sim >= threshold)


def threshold_candidates(similarities: np.ndarray) -> np.ndarray:
    """Midpoints between sorted distinct similarities, plus one below and one above."""
    u = np.unique(similarities)
    inner = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[u[0] - 0.5], inner, [u[-1] + 0.5]])


def calibrate_threshold(labeled_pairs: Sequence) -> float:
    """Threshold maximising verification accuracy; ties go to the larger threshold.

    ``labeled_pairs`` holds ``(a, b, same_identity)`` with embeddings or
    plain similarity floats in place of ``(a, b)`` as ``(sim, None, same)``.
    """
    sims, same = [], []
    for a, b, label in labeled_pairs:
        sims.append(float(a) if b is None else cosine_similarity(a, b))
        same.append(bool(label))
    sims_arr, same_arr = np.asarray(sims), np.asarray(same)
    if not same_arr.any() or same_arr.all():
        raise CalibrationError("calibration needs at least one positive and one negative pair")
    pos = np.sort(sims_arr[same_arr])
    neg = np.sort(sims_arr[~same_arr])
    cands = threshold_candidates(sims_arr)
    pos_accepted = pos.size - np.searchsorted(pos, cands, side="left")
    neg_rejected = np.searchsorted(neg, cands, side="left")
    correct = pos_accepted + neg_rejected
    best = np.flatnonzero(correct == correct.max())
    return float(cands[best[-1]])


def ensemble_embed(oracles: Sequence[Oracle], image: FaceImage, purpose: str = "query") -> list:
    if not oracles:
        raise InputError("ensemble needs at least one oracle")
    out = []
    for oracle in oracles:
        try:
            out.append(oracle.embed(image, purpose))
        except PatchforgeError as exc:
            raise EnsembleError(oracle.model_id, exc) from exc
    return out
