"""Bag-of-Concepts encoding of concept sets against a codebook.

Hard assignment yields the nearest-centroid histogram of an item.  Soft
assignment converts the full concept-to-centroid distance matrix into
similarities, keeps the top entries of each row and aggregates columns with
``max`` or ``sum``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .codebook import Codebook
from .errors import ConfigError, DimensionError, XmodalError
from .features import FeaturePack
from .transforms import SparseVector


class Assignment(str, Enum):
    HARD = "hard"
    SOFT = "soft"


class Aggregation(str, Enum):
    MAX = "max"
    SUM = "sum"


@dataclass(frozen=True)
class BocConfig:
    assignment: Assignment = Assignment.HARD
    aggregation: Aggregation | None = None
    row_keep_z: int | None = None
    exclude_stop_words_at_indexing: bool = False
    # 1/(1-D) with non-positive denominators mapped to 0 instead of 1/(1+D)
    paper_literal_similarity: bool = False

    def __post_init__(self):
        object.__setattr__(self, "assignment", Assignment(self.assignment))
        if self.assignment is Assignment.SOFT:
            if self.aggregation is None or self.row_keep_z is None:
                raise ConfigError("soft assignment needs aggregation and row_keep_z")
            object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
            if self.row_keep_z < 1:
                raise ConfigError(f"row_keep_z must be positive, got {self.row_keep_z}")
        elif self.aggregation is not None or self.row_keep_z is not None:
            raise ConfigError("aggregation and row_keep_z only apply to soft assignment")


def _as_concepts(concepts, codebook: Codebook) -> np.ndarray:
    x = np.asarray(concepts, dtype=np.float64)
    if x.size == 0:
        return np.zeros((0, codebook.dim))
    if x.ndim != 2 or x.shape[1] != codebook.dim:
        raise DimensionError(f"concepts of shape {x.shape} against a codebook of dim {codebook.dim}")
    return x


def distance_matrix(concepts, codebook: Codebook) -> np.ndarray:
    """``(n_i, p)`` matrix of L2 distances between concepts and centroids."""
    x = _as_concepts(concepts, codebook)
    c = codebook.centroids.astype(np.float64)
    d2 = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    return np.sqrt(np.maximum(d2, 0.0))


def similarity(dist: np.ndarray, paper_literal: bool = False) -> np.ndarray:
    if not paper_literal:
        return 1.0 / (1.0 + dist)
    denom = 1.0 - dist
    out = np.zeros_like(dist)
    pos = denom > 0
    out[pos] = 1.0 / denom[pos]
    return out


def keep_row_top_z(s: np.ndarray, z: int) -> np.ndarray:
    """Zero all but the ``z`` largest entries of every row (ties to the lower column)."""
    if z >= s.shape[1]:
        return s
    order = np.argsort(-s, axis=1, kind="stable")[:, :z]
    out = np.zeros_like(s)
    rows = np.arange(s.shape[0])[:, None]
    out[rows, order] = s[rows, order]
    return out


def hard_assign(concepts, codebook: Codebook) -> SparseVector:
    """Histogram of nearest-centroid indices (ties to the lowest centroid)."""
    x = _as_concepts(concepts, codebook)
    if len(x) == 0:
        return SparseVector.empty(codebook.p)
    nearest = np.argmin(distance_matrix(x, codebook), axis=1)
    counts = np.bincount(nearest, minlength=codebook.p)
    idx = np.flatnonzero(counts)
    return SparseVector(codebook.p, idx, counts[idx].astype(np.float64), check=False)


def soft_assign(concepts, codebook: Codebook, config: BocConfig) -> SparseVector:
    if config.assignment is not Assignment.SOFT:
        raise ConfigError("soft_assign called with a hard-assignment config")
    if config.row_keep_z > codebook.p:
        raise ConfigError(f"row_keep_z={config.row_keep_z} exceeds codebook size {codebook.p}")
    x = _as_concepts(concepts, codebook)
    if len(x) == 0:
        return SparseVector.empty(codebook.p)
    s = similarity(distance_matrix(x, codebook), config.paper_literal_similarity)
    s = keep_row_top_z(s, config.row_keep_z)
    a = s.max(axis=0) if config.aggregation is Aggregation.MAX else s.sum(axis=0)
    idx = np.flatnonzero(a)
    return SparseVector(codebook.p, idx, a[idx], check=False)


def encode_items(concept_sets: Sequence, codebook: Codebook, config: BocConfig) -> list[SparseVector]:
    if config.assignment is Assignment.HARD:
        return [hard_assign(x, codebook) for x in concept_sets]
    return [soft_assign(x, codebook, config) for x in concept_sets]


def encode_pack(pack: FeaturePack, codebook: Codebook,
                config: BocConfig) -> list[tuple[str, SparseVector]]:
    if pack.dim != codebook.dim:
        raise DimensionError(f"pack dim {pack.dim} differs from codebook dim {codebook.dim}")
    out = []
    for item in pack.items:
        x = item.concept_matrix(drop_stop_words=config.exclude_stop_words_at_indexing)
        try:
            vec = encode_items([x], codebook, config)[0]
        except XmodalError as exc:
            err = type(exc)(f"item {item.id!r}: {exc}")
            err.item_id = item.id
            raise err from exc
        out.append((item.id, vec))
    return out
