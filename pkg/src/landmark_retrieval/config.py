"""Declarative pipeline configuration.

Every section rejects unknown keys.  :func:`load_config` turns validation
failures into :class:`ConfigError` carrying the dotted field path.
"""
from __future__ import annotations

import math
import zlib
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DbscanParams(_Section):
    """Strict and relaxed cosine-distance radii for the cleaning pass."""

    eps: float = Field(0.3, gt=0)
    relaxed_eps: float = Field(0.5, gt=0)
    min_pts: int = Field(5, ge=1)
    min_cluster_size: int = Field(2, ge=1)

    @model_validator(mode="after")
    def _eps_order(self):
        if not self.eps < self.relaxed_eps:
            raise ValueError(f"eps ({self.eps}) must be < relaxed_eps ({self.relaxed_eps})")
        return self


class CutmixConfig(_Section):
    fraction_lo: float = Field(0.3, gt=0, le=1)
    fraction_hi: float = Field(0.7, gt=0, le=1)

    @model_validator(mode="after")
    def _range(self):
        if self.fraction_lo > self.fraction_hi:
            raise ValueError("fraction_lo must be <= fraction_hi")
        return self


class ArcFaceParams(_Section):
    margin: float = Field(0.3, ge=0, lt=math.pi / 2)
    scale: float = Field(30.0, gt=0)


class TrainConfig(_Section):
    lr0: float = Field(0.01, gt=0)
    power: float = Field(0.9, ge=0)
    batch_size: int = Field(32, ge=2)
    stage1_epochs: int = Field(24, ge=1)
    stage2_epochs: int = Field(12, ge=1)
    momentum: float = Field(0.0, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    embed_dim: int = Field(512, ge=1)
    bn_momentum: float = Field(0.1, gt=0, le=1)
    bn_epsilon: float = Field(1e-5, gt=0)
    cutmix: bool = False
    seed: int = Field(0, ge=0)


class SyntheticWorldConfig(_Section):
    kind: Literal["embedding", "pixel"] = "embedding"
    categories: int = Field(20, ge=1)
    modes_per_category: int = Field(2, ge=1)
    points_per_mode: int = Field(30, ge=1)
    mode_separation: float = Field(1.2, ge=0, description="angle in radians between a mode and its category centre")
    mode_spread: float = Field(0.08, ge=0)
    noise_fraction: float = Field(0.2, ge=0, lt=1)
    feature_dim: int = Field(64, ge=2)
    gallery_per_mode: int = Field(5, ge=0)
    queries_per_mode: int = Field(2, ge=0)
    image_size: int = Field(32, ge=4)
    seed: int = Field(0, ge=0)


class EvalConfig(_Section):
    k: int = Field(100, ge=1)


class PipelineConfig(_Section):
    seed: int = Field(0, ge=0)
    world: SyntheticWorldConfig = SyntheticWorldConfig()
    dbscan: DbscanParams = DbscanParams()
    cutmix: CutmixConfig = CutmixConfig()
    arcface: ArcFaceParams = ArcFaceParams()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()


def _format_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def build_config(data: Optional[dict] = None, overrides: Optional[dict] = None) -> PipelineConfig:
    """Validate a nested mapping, applying dotted-path ``overrides`` on top."""
    merged = dict(data or {})
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = merged
        *parents, leaf = dotted.split(".")
        for key in parents:
            node[key] = dict(node.get(key) or {})
            node = node[key]
        node[leaf] = value
    try:
        return PipelineConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def load_config(path=None, overrides: Optional[dict] = None) -> PipelineConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
    return build_config(data, overrides)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(), sort_keys=False)


def derive_seed(seed: int, stage: str) -> int:
    """Per-stage sub-seed so partial reruns stay reproducible."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
