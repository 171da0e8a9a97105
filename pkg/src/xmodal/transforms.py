"""Sparse encodings of global descriptors: c-relu, deep permutations, scalar quantization.

All transforms produce :class:`SparseVector` values.  Sorting ties are always
broken by ascending component index so every output is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

from .errors import ConfigError, DimensionError, DomainError


class SparseVector:
    """Non-negative sparse vector with strictly increasing indices and positive weights."""

    __slots__ = ("dim", "indices", "weights")

    def __init__(self, dim: int, indices, weights, *, check: bool = True):
        self.dim = int(dim)
        self.indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        self.weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if check:
            self._check()

    def _check(self) -> None:
        if self.dim < 1:
            raise DimensionError(f"sparse vector dim must be positive, got {self.dim}")
        if self.indices.shape != self.weights.shape:
            raise DimensionError("indices and weights differ in length")
        if self.indices.size:
            if self.indices[0] < 0 or self.indices[-1] >= self.dim:
                raise DimensionError(f"component index out of range [0, {self.dim})")
            if np.any(np.diff(self.indices) <= 0):
                raise ValueError("sparse vector indices must be strictly increasing")
            if not np.all(self.weights > 0) or not np.all(np.isfinite(self.weights)):
                raise ValueError("sparse vector weights must be finite and > 0")

    @classmethod
    def from_pairs(cls, dim: int, pairs: Iterable[tuple[int, float]]) -> "SparseVector":
        pairs = sorted(pairs)
        return cls(dim, [i for i, _ in pairs], [w for _, w in pairs])

    @classmethod
    def from_dense(cls, v) -> "SparseVector":
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if np.any(v < 0):
            raise DomainError("dense vector has negative components")
        idx = np.flatnonzero(v)
        return cls(v.size, idx, v[idx])

    @classmethod
    def empty(cls, dim: int) -> "SparseVector":
        return cls(dim, [], [], check=False)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def pairs(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.weights.tolist()))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.weights
        return out

    def norm(self) -> float:
        return math.sqrt(float(np.dot(self.weights, self.weights)))

    def __len__(self) -> int:
        return self.nnz

    def __eq__(self, other):
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (self.dim == other.dim and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.weights, other.weights))

    def __repr__(self):
        shown = self.pairs()[:8]
        more = ", ..." if self.nnz > 8 else ""
        return f"SparseVector(dim={self.dim}, {shown}{more})"


class Method(str, Enum):
    DEEP_PERMUTATION = "deep_permutation"
    SCALAR_QUANTIZATION = "scalar_quantization"


@dataclass(frozen=True)
class TransformConfig:
    method: Method
    keep_z: int | None = None
    scale: float | None = None
    apply_crelu: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.method is Method.SCALAR_QUANTIZATION:
            if self.scale is None or not self.scale > 0:
                raise ConfigError("scalar quantization needs a positive scale")
        elif self.scale is not None:
            raise ConfigError("scale only applies to scalar quantization")
        if self.keep_z is not None and self.keep_z < 1:
            raise ConfigError(f"keep_z must be positive, got {self.keep_z}")

    def output_dim(self, d: int) -> int:
        return 2 * d if self.apply_crelu else d


def keep_z_for_sparsity(sparsity: float, dim: int) -> int:
    """Number of components kept when a fraction ``sparsity`` of ``dim`` is zeroed.

    Rounds half up and never returns less than one component.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ConfigError(f"sparsity factor must lie in [0, 1), got {sparsity}")
    return max(1, int(math.floor((1.0 - sparsity) * dim + 0.5)))


def crelu(v) -> np.ndarray:
    """Concatenate ``v`` with ``-v`` and clip negatives: ``[max(v,0), max(-v,0)]``."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise DimensionError("c-relu of an empty vector")
    return np.concatenate([np.maximum(v, 0.0), np.maximum(-v, 0.0)])


def _as_nonneg(v, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise DimensionError(f"{what} of an empty vector")
    if np.any(v < 0):
        raise DomainError(f"{what} expects non-negative input; apply c-relu first")
    return v


def _check_keep_z(keep_z: int | None, n: int) -> int:
    if keep_z is None:
        return n
    if keep_z < 0:
        raise ConfigError(f"keep_z must be non-negative, got {keep_z}")
    if keep_z > n:
        raise ConfigError(f"keep_z={keep_z} exceeds vector length {n}")
    return keep_z


def descending_order(values: np.ndarray) -> np.ndarray:
    """Indices sorted by descending value, ties by ascending index."""
    return np.argsort(-values, kind="stable")


def permutation(v) -> list[int]:
    """The 1-based permutation listing component indices by decreasing activation."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    return (descending_order(v) + 1).tolist()


def deep_permutation(v, keep_z: int | None = None) -> SparseVector:
    """Deep-permutation encoding of a non-negative vector.

    Component ``j`` gets weight ``n - rank(j)`` (the largest activation gets ``n``).
    Zero activations are not ranked into the output, and only the ``keep_z``
    heaviest weights survive.
    """
    v = _as_nonneg(v, "deep permutation")
    n = v.size
    keep_z = _check_keep_z(keep_z, n)
    order = descending_order(v)
    nnz = int(np.count_nonzero(v))
    kept = order[:min(keep_z, nnz)]
    weights = (n - np.arange(kept.size)).astype(np.float64)
    sort = np.argsort(kept)
    return SparseVector(n, kept[sort], weights[sort], check=False)


def scalar_quantize(v, scale: float, keep_z: int | None = None) -> SparseVector:
    """``floor(scale * v)`` with zeros dropped, then top-``keep_z`` by weight."""
    if not scale > 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    v = _as_nonneg(v, "scalar quantization")
    keep_z = _check_keep_z(keep_z, v.size)
    q = np.floor(scale * v)
    idx = np.flatnonzero(q)
    return sparsify_top_z(SparseVector(v.size, idx, q[idx], check=False), keep_z)


def sparsify_top_z(v, z: int) -> SparseVector:
    """Keep the ``z`` largest weights (ties by ascending index)."""
    if z < 0:
        raise ConfigError(f"z must be non-negative, got {z}")
    if not isinstance(v, SparseVector):
        v = SparseVector.from_dense(v)
    if z >= v.nnz:
        return v
    # indices are ascending, so a stable sort on -weight breaks ties by index
    top = np.sort(np.argsort(-v.weights, kind="stable")[:z])
    return SparseVector(v.dim, v.indices[top], v.weights[top], check=False)


def sparse_dot(a: SparseVector, b: SparseVector) -> float:
    _, ia, ib = np.intersect1d(a.indices, b.indices, assume_unique=True, return_indices=True)
    dot = 0.0
    for x, y in zip(a.weights[ia].tolist(), b.weights[ib].tolist()):
        dot += x * y
    return dot


def sparse_cosine(a: SparseVector, b: SparseVector) -> float:
    """Cosine similarity of two sparse vectors; 0 when either is empty."""
    if a.dim != b.dim:
        raise DimensionError(f"cosine between dims {a.dim} and {b.dim}")
    if a.nnz == 0 or b.nnz == 0:
        return 0.0
    return sparse_dot(a, b) / (a.norm() * b.norm())


def transform_vector(v, config: TransformConfig) -> SparseVector:
    """Run the full global-descriptor pipeline on one dense vector."""
    x = crelu(v) if config.apply_crelu else np.asarray(v, dtype=np.float64).reshape(-1)
    if config.method is Method.DEEP_PERMUTATION:
        return deep_permutation(x, config.keep_z)
    return scalar_quantize(x, config.scale, config.keep_z)


def transform_matrix(vectors: np.ndarray, config: TransformConfig) -> list[SparseVector]:
    return [transform_vector(v, config) for v in np.asarray(vectors)]
