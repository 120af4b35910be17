"""Run configuration: a YAML document validated before anything loads.

Keys may be nested or dotted (``attack.eta: 0.02``); both forms merge into
one tree. Unknown keys are rejected. ``override`` applies ``key=value``
strings on top, with values parsed as YAML scalars.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .attack import AttackConfig
from .errors import ConfigurationError
from .losses import LossWeights


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WeightsConfig(_Strict):
    lambda_adv: float = Field(10.0, ge=0)
    lambda_attn: float = Field(10000.0, ge=0)
    lambda_dir: float = Field(10.0, ge=0)


class AttackSection(_Strict):
    N: int = Field(200, ge=1)
    eta: float = Field(0.01, gt=0)
    alpha: float = Field(0.5, ge=0, le=1)
    invert_steps: int = Field(5, ge=1)
    weights: WeightsConfig = WeightsConfig()
    grad_mode: Literal["analytic", "zeroth_order"] = "analytic"
    zo_samples: int = Field(8, ge=1)
    zo_sigma: float = Field(1e-2, gt=0)
    seed: int = 0
    threshold: float = 0.8
    decode_direct: bool = False


class BackendSection(_Strict):
    kind: Literal["standin", "pretrained"] = "standin"
    options: dict = Field(default_factory=dict)


class RendererSection(_Strict):
    mode: Literal["planar", "uv"] = "planar"
    region: Literal["lower_face", "rectangle", "mask"] = "lower_face"
    rectangle: Optional[tuple[int, int, int, int]] = None
    mask_path: Optional[str] = None
    uv_size: int = Field(64, ge=2)

    @field_validator("rectangle")
    @classmethod
    def _ordered(cls, v):
        if v is not None and not (v[0] < v[1] and v[2] < v[3]):
            raise ValueError("rectangle is (top, bottom, left, right) with top < bottom and left < right")
        return v


class OracleSection(_Strict):
    kind: Literal["toy", "linear", "remote"] = "toy"
    seed: int = 0
    dim: int = Field(32, ge=1)
    region_weight: float = Field(3.0, gt=0)
    endpoint: Optional[str] = None
    model: str = "default"
    attempts: int = Field(3, ge=1)
    timeout: float = Field(10.0, gt=0)


class DataSection(_Strict):
    root: Optional[str] = None
    pairs: int = Field(20, ge=1)
    pair_seed: int = 0
    screen: bool = True
    pool_root: Optional[str] = None
    image_size: int = Field(16, ge=2)


class RunConfig(_Strict):
    attack: AttackSection = AttackSection()
    backend: BackendSection = BackendSection()
    renderer: RendererSection = RendererSection()
    oracle: OracleSection = OracleSection()
    data: DataSection = DataSection()
    out: str = "runs"

    def attack_config(self) -> AttackConfig:
        a = self.attack.model_dump()
        a["weights"] = LossWeights(**a["weights"])
        return AttackConfig(**a)

    def canonical(self) -> dict:
        return self.model_dump(mode="json")

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def dump(self) -> str:
        return yaml.safe_dump(self.canonical(), sort_keys=True)


def expand_dotted(doc: dict) -> dict:
    """Turn ``{"a.b": 1, "a": {"c": 2}}`` into ``{"a": {"b": 1, "c": 2}}``."""
    out: dict = {}
    for key, value in doc.items():
        if not isinstance(key, str):
            raise ConfigurationError(f"config keys must be strings, got {key!r}")
        if isinstance(value, dict):
            value = expand_dotted(value)
        node = out
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"key {key!r} conflicts with a scalar value")
        if isinstance(value, dict) and isinstance(node.get(leaf), dict):
            _merge(node[leaf], value, strict=True, where=key)
        elif leaf in node:
            raise ConfigurationError(f"key {key!r} given twice")
        else:
            node[leaf] = value
    return out


def _merge(dst: dict, src: dict, strict: bool = False, where: str = "") -> None:
    for k, v in src.items():
        path = f"{where}.{k}" if where else k
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v, strict, path)
        elif strict and k in dst:
            raise ConfigurationError(f"key {path!r} given twice")
        else:
            dst[k] = v


def parse_config(doc: Optional[dict], overrides: tuple = ()) -> RunConfig:
    tree = expand_dotted(doc or {})
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override {item!r} is not key=value")
        _merge(tree, expand_dotted({key.strip(): yaml.safe_load(raw)}))
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration:\n{exc}") from exc


def load_config(path: Optional[Union[str, Path]] = None, overrides: tuple = ()) -> RunConfig:
    doc = None
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc
        if doc is not None and not isinstance(doc, dict):
            raise ConfigurationError(f"config {path} must hold a mapping")
    return parse_config(doc, overrides)
