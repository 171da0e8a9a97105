"""Inverted index with exact posting-list cosine scoring, and a dense exact scorer.

Scores from :func:`query_topk` are computed the same way, in the same order, as
:func:`xmodal.transforms.sparse_cosine` so the index reproduces an exhaustive
sparse-cosine scan exactly.  Weights live in posting lists as ``float32``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._binio import Reader, pack_str
from .errors import (DimensionError, DuplicateIdError, EmptyVectorError, FormatError,
                     IoError, UnknownIdError)
from .transforms import SparseVector

INDEX_MAGIC = b"XMIX"
INDEX_VERSION = 1


def _id_ranks(ids: Sequence[str]) -> np.ndarray:
    order = sorted(range(len(ids)), key=ids.__getitem__)
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[order] = np.arange(len(ids))
    return ranks


def _rank_candidates(cand: np.ndarray, scores: np.ndarray, id_rank: np.ndarray, k: int) -> np.ndarray:
    """Positions into ``cand`` of the top ``k`` by (score desc, id asc)."""
    if cand.size > k:
        kth = np.partition(-scores, k - 1)[k - 1]
        keep = np.flatnonzero(-scores <= kth)
        cand, scores = cand[keep], scores[keep]
    else:
        keep = np.arange(cand.size)
    order = np.lexsort((id_rank[cand], -scores))[:k]
    return keep[order]


@dataclass(eq=False)
class InvertedIndex:
    dim: int
    ids: list[str]
    post_ords: list[np.ndarray]
    post_weights: list[np.ndarray]
    norms: np.ndarray
    modality: str | None = None
    _w64: list[np.ndarray] = field(init=False, repr=False)
    _id_rank: np.ndarray = field(init=False, repr=False)
    _ordinal: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._w64 = [w.astype(np.float64) for w in self.post_weights]
        self._id_rank = _id_ranks(self.ids)
        self._ordinal = {item_id: i for i, item_id in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._ordinal

    def ordinal(self, item_id: str) -> int:
        try:
            return self._ordinal[item_id]
        except KeyError:
            raise UnknownIdError(f"unknown item id {item_id!r}") from None

    def posting(self, component: int) -> list[tuple[int, float]]:
        return list(zip(self.post_ords[component].tolist(), self.post_weights[component].tolist()))

    def vectors(self) -> dict[str, SparseVector]:
        """Reconstruct every indexed vector from the posting lists."""
        per_item: list[list[tuple[int, float]]] = [[] for _ in self.ids]
        for comp in range(self.dim):
            for o, w in zip(self.post_ords[comp].tolist(), self._w64[comp].tolist()):
                per_item[o].append((comp, w))
        return {item_id: SparseVector.from_pairs(self.dim, pairs)
                for item_id, pairs in zip(self.ids, per_item)}

    def vector(self, item_id: str) -> SparseVector:
        o = self.ordinal(item_id)
        pairs = []
        for comp in range(self.dim):
            ords = self.post_ords[comp]
            pos = np.searchsorted(ords, o)
            if pos < ords.size and ords[pos] == o:
                pairs.append((comp, float(self._w64[comp][pos])))
        return SparseVector.from_pairs(self.dim, pairs)

    def __eq__(self, other):
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        return (self.dim == other.dim and self.ids == other.ids
                and all(np.array_equal(a, b) for a, b in zip(self.post_ords, other.post_ords))
                and all(np.array_equal(a, b) for a, b in zip(self.post_weights, other.post_weights)))


def build_index(entries: Iterable[tuple[str, SparseVector]], modality: str | None = None,
                dim: int | None = None) -> InvertedIndex:
    """Index ``(item-id, vector)`` pairs; ids must be unique and vectors non-empty."""
    entries = list(entries)
    if dim is None:
        if not entries:
            raise DimensionError("cannot infer dim of an empty index; pass dim")
        dim = entries[0][1].dim
    ids, seen = [], set()
    comp_ords: list[list[int]] = [[] for _ in range(dim)]
    comp_ws: list[list[float]] = [[] for _ in range(dim)]
    norms = np.empty(len(entries))
    for ordinal, (item_id, vec) in enumerate(entries):
        if item_id in seen:
            raise DuplicateIdError(f"duplicate item id {item_id!r}")
        seen.add(item_id)
        if vec.dim != dim:
            raise DimensionError(f"item {item_id!r} has dim {vec.dim}, index dim is {dim}")
        if vec.nnz == 0:
            raise EmptyVectorError(f"item {item_id!r} has an empty vector")
        w32 = vec.weights.astype(np.float32)
        if not np.all(w32 > 0) or not np.all(np.isfinite(w32)):
            raise EmptyVectorError(f"item {item_id!r} has weights not representable as float32")
        ids.append(item_id)
        norms[ordinal] = SparseVector(dim, vec.indices, w32, check=False).norm()
        for comp, w in zip(vec.indices.tolist(), w32.tolist()):
            comp_ords[comp].append(ordinal)
            comp_ws[comp].append(w)
    post_ords = [np.asarray(o, dtype=np.int64) for o in comp_ords]
    post_weights = [np.asarray(w, dtype=np.float32) for w in comp_ws]
    return InvertedIndex(dim, ids, post_ords, post_weights, norms, modality)


def query_topk(index: InvertedIndex, q: SparseVector, k: int, *, exhaustive: bool = False,
               stats: dict | None = None) -> list[tuple[str, float]]:
    """Top-``k`` items by cosine, visiting only the posting lists of ``q``'s components.

    Items sharing no component with ``q`` are not returned unless ``exhaustive`` is
    set, in which case they follow the touched items with score 0 (ascending id),
    so the result is a prefix of the total ranking of the whole index.
    """
    if q.dim != index.dim:
        raise DimensionError(f"query dim {q.dim} differs from index dim {index.dim}")
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if q.nnz == 0 or len(index) == 0:
        return []
    acc = np.zeros(len(index))
    touched = np.zeros(len(index), dtype=bool)
    updates = 0
    for comp, qw in zip(q.indices.tolist(), q.weights.tolist()):
        ords = index.post_ords[comp]
        if ords.size == 0:
            continue
        acc[ords] += qw * index._w64[comp]
        touched[ords] = True
        updates += ords.size
    if stats is not None:
        stats["accumulator_updates"] = stats.get("accumulator_updates", 0) + updates
        stats["candidates"] = stats.get("candidates", 0) + int(touched.sum())
    cand = np.arange(len(index)) if exhaustive else np.flatnonzero(touched)
    if cand.size == 0:
        return []
    scores = np.zeros(cand.size)
    hit = touched[cand]
    scores[hit] = acc[cand[hit]] / (q.norm() * index.norms[cand[hit]])
    pick = _rank_candidates(cand, scores, index._id_rank, k)
    return [(index.ids[cand[p]], float(scores[p])) for p in pick]


# -- dense exact scoring -------------------------------------------------------------


@dataclass(eq=False)
class DenseStore:
    ids: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise DimensionError(f"{len(self.ids)} ids for vectors of shape {self.vectors.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise DuplicateIdError("duplicate ids in dense store")
        self._ordinal = {item_id: i for i, item_id in enumerate(self.ids)}
        self._id_rank = _id_ranks(self.ids)
        self._norms = np.sqrt((self.vectors * self.vectors).sum(axis=1))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_pack(cls, pack) -> "DenseStore":
        return cls(pack.ids, pack.global_matrix())

    def ordinals(self, ids: Iterable[str]) -> np.ndarray:
        try:
            return np.asarray([self._ordinal[i] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise UnknownIdError(f"unknown item id {exc.args[0]!r}") from None

    def cosines(self, q, rows: np.ndarray | None = None) -> np.ndarray:
        """Exact cosine of ``q`` against the given rows (all rows by default).

        Each row's score is reduced independently, so a score does not depend on
        which other rows were requested.
        """
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise DimensionError(f"query dim {q.shape[0]} differs from store dim {self.dim}")
        m = self.vectors if rows is None else self.vectors[rows]
        norms = self._norms if rows is None else self._norms[rows]
        qn = np.sqrt((q * q).sum())
        dots = (m * q).sum(axis=1)
        denom = norms * qn
        out = np.zeros(m.shape[0])
        nz = denom > 0
        out[nz] = dots[nz] / denom[nz]
        return out


def exact_topk(store: DenseStore, q, k: int,
               restrict_to: Iterable[str] | None = None) -> list[tuple[str, float]]:
    """Exact cosine top-``k`` over the store, or over ``restrict_to`` only."""
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    rows = np.arange(len(store.ids)) if restrict_to is None else np.unique(store.ordinals(restrict_to))
    if rows.size == 0:
        return []
    scores = store.cosines(q, rows)
    pick = _rank_candidates(rows, scores, store._id_rank, k)
    return [(store.ids[rows[p]], float(scores[p])) for p in pick]


# -- persistence ---------------------------------------------------------------------


def encode_index(index: InvertedIndex) -> bytes:
    out = [INDEX_MAGIC, struct.pack("<HIQ", INDEX_VERSION, index.dim, len(index.ids))]
    out.extend(pack_str(i) for i in index.ids)
    out.append(np.asarray(index.norms, dtype="<f4").tobytes())
    for ords, ws in zip(index.post_ords, index.post_weights):
        rec = np.empty(ords.size, dtype=[("o", "<u4"), ("w", "<f4")])
        rec["o"] = ords
        rec["w"] = ws
        out.append(struct.pack("<I", ords.size))
        out.append(rec.tobytes())
    return b"".join(out)


def decode_index(buf: bytes) -> InvertedIndex:
    r = Reader(buf)
    if len(buf) < 4 or bytes(r.take(4)) != INDEX_MAGIC:
        raise FormatError("not an index segment: bad magic")
    version, dim, count = r.unpack("<HIQ")
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}")
    ids = []
    for _ in range(count):
        item_id = r.string()
        if item_id is None:
            raise FormatError("empty id in index id table")
        ids.append(item_id)
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate ids in index id table")
    stored_norms = r.f32_array(count).astype(np.float64)
    post_ords, post_weights = [], []
    seen = np.zeros(count, dtype=bool)
    dt = np.dtype([("o", "<u4"), ("w", "<f4")])
    for comp in range(dim):
        n = r.u32()
        rec = np.frombuffer(r.take(n * dt.itemsize), dtype=dt)
        ords = rec["o"].astype(np.int64)
        ws = rec["w"].astype(np.float32)
        if n and (ords[-1] >= count or np.any(np.diff(ords) <= 0)):
            raise FormatError(f"posting list {comp} is unsorted or out of range")
        if n and not np.all(ws > 0):
            raise FormatError(f"posting list {comp} holds non-positive weights")
        seen[ords] = True
        post_ords.append(ords)
        post_weights.append(ws)
    if not r.at_end():
        raise FormatError("trailing bytes after last posting list")
    if count and not seen.all():
        raise FormatError("index holds items without any posting")
    index = InvertedIndex(dim, ids, post_ords, post_weights, np.zeros(count))
    # norms are recomputed in float64 exactly as build_index does; the stored
    # float32 copy is only a consistency check
    vecs = index.vectors()
    index.norms = np.array([vecs[i].norm() for i in ids])
    if count and not np.allclose(index.norms, stored_norms, rtol=1e-5, atol=0):
        raise FormatError("stored norms disagree with posting lists")
    return index


def save_index(index: InvertedIndex, path: str | Path) -> None:
    try:
        Path(path).write_bytes(encode_index(index))
    except OSError as exc:
        raise IoError(f"cannot write index {path}: {exc}") from exc


def load_index(path: str | Path) -> InvertedIndex:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read index {path}: {exc}") from exc
    return decode_index(buf)
