"""Evaluation protocols: impersonation sweeps, universality and ablations.

Datasets are directories laid out as ``<root>/<identity>/<image>.png``.
Mean NQ is averaged over successful attacks only; when nothing succeeds
it is reported as ``None``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .attack import AttackConfig, run_attack
from .errors import DatasetError, PatchforgeError
from .imaging import FaceImage, load_image
from .losses import LossWeights
from .oracle import Oracle, cosine_similarity
from .render import Renderer

log = logging.getLogger(__name__)


@dataclass
class Components:
    backend: object
    renderer: Renderer
    oracle: object


# -- pair sampling ------------------------------------------------------------------


@dataclass(frozen=True)
class Pair:
    source: str
    target: str
    source_id: str
    target_id: str

    def __post_init__(self):
        if self.source_id == self.target_id:
            raise DatasetError(f"pair uses one identity twice: {self.source_id}")


@dataclass(frozen=True)
class PairSet:
    pairs: tuple
    seed: int

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def to_json(self) -> dict:
        return {"seed": self.seed, "pairs": [asdict(p) for p in self.pairs]}


def scan_dataset(root: Union[str, Path]) -> dict:
    """``{identity: [png paths]}``, both levels sorted."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    found = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        images = sorted(str(p) for p in d.glob("*.png"))
        if images:
            found[d.name] = images
    return found


def screen_sources(dataset: dict, oracle: Oracle, threshold: float) -> dict:
    """Keep images the oracle verifies against another image of the same identity.

    Identities with a single image cannot be screened and are kept as is.
    """
    kept = {}
    for ident, paths in dataset.items():
        if len(paths) < 2:
            log.info("identity %s has one image; skipping pre-screening", ident)
            kept[ident] = list(paths)
            continue
        embs = [oracle.embed(load_image(p, ident), purpose="screen") for p in paths]
        ok = []
        for i, p in enumerate(paths):
            ref = embs[1] if i == 0 else embs[0]
            if cosine_similarity(embs[i], ref) >= threshold:
                ok.append(p)
            else:
                log.info("dropping %s: not verified against its own identity", p)
        kept[ident] = ok
    return kept


def sample_pairs(dataset_root: Union[str, Path], n: int, seed: int = 0, oracle: Optional[Oracle] = None,
                 threshold: float = 0.8) -> PairSet:
    """``n`` distinct cross-identity pairs drawn without replacement.

    Candidates are unordered image pairs; the seed picks both the pairs and
    which side of each becomes the source. With an ``oracle``, source
    images it cannot verify as their own identity are dropped first.
    """
    dataset = scan_dataset(dataset_root)
    if len(dataset) < 2:
        raise DatasetError(f"need at least 2 identities under {dataset_root}, found {len(dataset)}")
    sources = screen_sources(dataset, oracle, threshold) if oracle is not None else dataset
    images = [(p, ident) for ident, paths in dataset.items() for p in paths]
    usable = {p for paths in sources.values() for p in paths}
    candidates = [(a, b) for a, b in itertools.combinations(images, 2)
                  if a[1] != b[1] and (a[0] in usable or b[0] in usable)]
    if n > len(candidates):
        raise DatasetError(f"asked for {n} pairs but only {len(candidates)} cross pairs exist")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=n, replace=False)
    flips = rng.random(n) < 0.5
    pairs = []
    for idx, flip in zip(picks, flips):
        a, b = candidates[idx]
        if flip:
            a, b = b, a
        if a[0] not in usable:
            a, b = b, a
        pairs.append(Pair(a[0], b[0], a[1], b[1]))
    return PairSet(tuple(pairs), seed)


# -- impersonation ------------------------------------------------------------------


@dataclass(frozen=True)
class PairOutcome:
    source: str
    target: str
    success: bool
    nq: int
    epochs: int = 0
    final_similarity: Optional[float] = None
    error: Optional[str] = None


@dataclass
class EvalReport:
    asr: Optional[float]
    mean_nq: Optional[float]
    evaluated: int
    successes: int
    errors: int
    outcomes: list
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        out["outcomes"] = [asdict(o) for o in self.outcomes]
        return out


def aggregate(outcomes: Sequence[PairOutcome], config: Optional[dict] = None) -> EvalReport:
    """ASR over pairs that ran to completion; mean NQ over the successful ones."""
    done = [o for o in outcomes if o.error is None]
    wins = [o for o in done if o.success]
    asr = len(wins) / len(done) if done else None
    mean_nq = float(np.mean([o.nq for o in wins])) if wins else None
    return EvalReport(asr, mean_nq, len(done), len(wins), len(outcomes) - len(done), list(outcomes),
                      dict(config or {}))


def evaluate_impersonation(pairs: PairSet, cfg: AttackConfig, components: Components,
                           on_pair=None) -> EvalReport:
    """Attack every pair; a pair that raises is recorded and the sweep goes on."""
    outcomes = []
    for pair in pairs:
        try:
            x = load_image(pair.source, pair.source_id)
            x_tar = load_image(pair.target, pair.target_id)
            res = run_attack(x, x_tar, cfg, components.backend, components.renderer, components.oracle)
            out = PairOutcome(pair.source, pair.target, res.success, res.nq, res.epochs_used,
                              res.similarity_trace[-1])
        except (PatchforgeError, OSError) as exc:
            log.warning("pair %s -> %s failed: %s", pair.source, pair.target, exc)
            out = PairOutcome(pair.source, pair.target, False, 0, error=f"{type(exc).__name__}: {exc}")
        outcomes.append(out)
        if on_pair is not None:
            on_pair(out)
    return aggregate(outcomes, config_snapshot(cfg))


def config_snapshot(cfg: AttackConfig) -> dict:
    return asdict(cfg)


# -- universality ------------------------------------------------------------------------


@dataclass(frozen=True)
class PoolOutcome:
    identity: Optional[str]
    similarity: Optional[float]
    match: bool
    error: Optional[str] = None


@dataclass
class UniversalityReport:
    target_identity: Optional[str]
    source_identity: Optional[str]
    pool_size: int
    matches: int
    universal_asr: Optional[float]
    exclusive_pool_size: int
    exclusive_matches: int
    exclusive_asr: Optional[float]
    outcomes: list

    def to_json(self) -> dict:
        out = asdict(self)
        out["outcomes"] = [asdict(o) for o in self.outcomes]
        return out


def universality_eval(patch: FaceImage, pool: Sequence[FaceImage], target: FaceImage, components: Components,
                      threshold: float = 0.8, source_identity: Optional[str] = None) -> UniversalityReport:
    """Render ``patch`` onto every pool face and count verifications as ``target``.

    The exclusive counts leave out pool faces of ``source_identity``, the
    identity the patch was optimised on.
    """
    oracles = components.oracle if isinstance(components.oracle, (list, tuple)) else [components.oracle]
    outcomes = []
    if pool:
        targets = [o.embed(target, purpose="target") for o in oracles]
    for face in pool:
        try:
            adv = components.renderer(face, patch)
            sims = [cosine_similarity(o.embed(adv, purpose="universality"), t) for o, t in zip(oracles, targets)]
            sim = sum(sims) / len(sims)
            outcomes.append(PoolOutcome(face.identity, sim, sim >= threshold))
        except PatchforgeError as exc:
            log.warning("universality: face %s failed: %s", face.identity, exc)
            outcomes.append(PoolOutcome(face.identity, None, False, f"{type(exc).__name__}: {exc}"))

    def rate(items):
        hits = sum(o.match for o in items)
        return len(items), hits, (hits / len(items) if items else None)

    size, hits, asr = rate(outcomes)
    excl = [o for o in outcomes if source_identity is None or o.identity != source_identity]
    ex_size, ex_hits, ex_asr = rate(excl)
    return UniversalityReport(target.identity, source_identity, size, hits, asr, ex_size, ex_hits, ex_asr,
                              outcomes)


# -- ablation ---------------------------------------------------------------------------


@dataclass
class AblationReport:
    baseline: EvalReport
    ablated: EvalReport
    disable_attn: bool
    disable_dir: bool

    @property
    def delta_asr(self) -> Optional[float]:
        return _delta(self.ablated.asr, self.baseline.asr)

    @property
    def delta_mean_nq(self) -> Optional[float]:
        return _delta(self.ablated.mean_nq, self.baseline.mean_nq)

    def to_json(self) -> dict:
        return {
            "disable_attn": self.disable_attn,
            "disable_dir": self.disable_dir,
            "delta_asr": self.delta_asr,
            "delta_mean_nq": self.delta_mean_nq,
            "baseline": self.baseline.to_json(),
            "ablated": self.ablated.to_json(),
        }


def _delta(a, b):
    return None if a is None or b is None else a - b


def ablate_config(cfg: AttackConfig, disable_attn: bool = False, disable_dir: bool = False) -> AttackConfig:
    w = cfg.weights
    weights = LossWeights(w.lambda_adv, 0.0 if disable_attn else w.lambda_attn, 0.0 if disable_dir else w.lambda_dir)
    return replace(cfg, weights=weights)


def run_ablation(pairs: PairSet, cfg: AttackConfig, components: Components, disable_attn: bool = False,
                 disable_dir: bool = False) -> AblationReport:
    """Run ``pairs`` with the full objective and with the toggled terms zeroed.

    Deltas are ablated minus baseline.
    """
    base = evaluate_impersonation(pairs, cfg, components)
    ablated = evaluate_impersonation(pairs, ablate_config(cfg, disable_attn, disable_dir), components)
    return AblationReport(base, ablated, disable_attn, disable_dir)


# -- text output -------------------------------------------------------------------------


def _fmt(value, pct=False) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{100 * value:.2f}%" if pct else f"{value:.2f}"


def summary_table(rows: Sequence[tuple]) -> str:
    """Plain-text table of ``(model, dataset, EvalReport)`` rows: ASR and NQ columns."""
    header = ("Model", "Dataset", "ASR", "NQ")
    body = [(m, d, _fmt(r.asr, pct=True), _fmt(r.mean_nq)) for m, d, r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]

    def line(cells):
        return "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()

    return "\n".join([line(header), line(["-" * w for w in widths]), *map(line, body)]) + "\n"
