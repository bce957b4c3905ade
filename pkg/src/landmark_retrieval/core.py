"""Numeric building blocks: embeddings, pooling, normalization and similarity.

Embeddings are plain 1-D ``float64`` numpy arrays; feature grids are
``(H, W, C)`` arrays.  Everything here is a pure function.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .exceptions import DimMismatchError, DuplicateIdError, FormatError, InvalidPError, ZeroVectorError

DEFAULT_EMBED_DIM = 512
ZERO_NORM = 1e-12


def as_embedding(values) -> np.ndarray:
    """Validate ``values`` as an embedding vector and return a float64 copy."""
    v = np.array(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise DimMismatchError(f"embedding must be a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise FormatError("embedding contains NaN or Inf")
    return v


def as_feature_grid(values) -> np.ndarray:
    g = np.array(values, dtype=np.float64)
    if g.ndim != 3 or min(g.shape) < 1:
        raise DimMismatchError(f"feature grid must be (H, W, C) with positive sizes, got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise FormatError("feature grid contains NaN or Inf")
    return g


@dataclass(frozen=True)
class LabeledEmbedding:
    id: str
    label: int
    vector: np.ndarray

    def __post_init__(self):
        if int(self.label) < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")
        vec = as_embedding(self.vector)
        vec.setflags(write=False)
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]

    def __eq__(self, other):
        if not isinstance(other, LabeledEmbedding):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and np.array_equal(self.vector, other.vector)
        )

    __hash__ = None


def l2_normalize(v) -> np.ndarray:
    v = as_embedding(v)
    norm = np.linalg.norm(v)
    if norm <= ZERO_NORM:
        raise ZeroVectorError("cannot normalize a zero vector")
    return v / norm


def l2_normalize_rows(X: np.ndarray) -> np.ndarray:
    """Row-wise :func:`l2_normalize` for a 2-D array."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if X.shape[0] and np.any(norms <= ZERO_NORM):
        raise ZeroVectorError("cannot normalize a zero row")
    return X / norms


def cosine_similarity(a, b) -> float:
    a = as_embedding(a)
    b = as_embedding(b)
    if a.shape != b.shape:
        raise DimMismatchError(f"dims differ: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= ZERO_NORM or nb <= ZERO_NORM:
        raise ZeroVectorError("cosine similarity of a zero vector is undefined")
    # clamp protects arccos downstream
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def gap_pool(grid) -> np.ndarray:
    """Global average pooling over the spatial axes of an ``(H, W, C)`` grid."""
    g = as_feature_grid(grid)
    return g.mean(axis=(0, 1))


def gem_pool(grid, p: float = 3.0) -> np.ndarray:
    """Generalized-mean pooling; negatives are clamped to zero first.

    ``p == 1`` reproduces :func:`gap_pool` on non-negative grids.
    """
    if not p >= 1:
        raise InvalidPError(f"GeM exponent must be >= 1, got {p}")
    g = np.maximum(as_feature_grid(grid), 0.0)
    if p == 1:
        return g.mean(axis=(0, 1))
    return np.mean(g**p, axis=(0, 1)) ** (1.0 / p)


def concat_embeddings(a, b, renorm: bool = True) -> np.ndarray:
    out = np.concatenate([as_embedding(a), as_embedding(b)])
    if renorm:
        return l2_normalize(out)
    return out


def stack_vectors(rows: Sequence[LabeledEmbedding]) -> np.ndarray:
    """Stack row vectors into an ``(n, dim)`` matrix, checking dims agree."""
    if not rows:
        return np.zeros((0, 0))
    dim = rows[0].dim
    for r in rows:
        if r.dim != dim:
            raise DimMismatchError(f"row {r.id!r} has dim {r.dim}, expected {dim}")
    return np.stack([r.vector for r in rows])


def check_unique_ids(rows: Iterable[LabeledEmbedding]) -> None:
    seen = set()
    for r in rows:
        if r.id in seen:
            raise DuplicateIdError(f"duplicate id {r.id!r}")
        seen.add(r.id)
