"""Concept codebooks: kmeans over a mixed visual/textual concept pool, or frequent words."""

from __future__ import annotations

import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._binio import Reader, pack_str
from .errors import (ConfigError, DimensionError, EmptyPoolError, FormatError,
                     InsufficientDataError, IoError)
from .features import FeaturePack, Modality

log = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"XMCB"
CODEBOOK_VERSION = 1

DEFAULT_P = 1000
DEFAULT_POOL_SIZE = 100_000


class CodebookMethod(str, Enum):
    KMEANS = "kmeans"
    WORD_FREQUENCY = "word_frequency"


_METHOD_CODES = {CodebookMethod.KMEANS: 0, CodebookMethod.WORD_FREQUENCY: 1}
_CODE_METHODS = {v: k for k, v in _METHOD_CODES.items()}


@dataclass(eq=False)
class Codebook:
    centroids: np.ndarray
    method: CodebookMethod = CodebookMethod.KMEANS
    labels: list[str] | None = None
    built_with_stop_words: bool = True
    built_contextualized: bool = False
    # per-iteration kmeans objective; not persisted
    objective_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        self.method = CodebookMethod(self.method)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1 or self.centroids.shape[1] < 1:
            raise DimensionError(f"centroids must be a non-empty (p, d) array, got {self.centroids.shape}")
        if self.labels is not None and len(self.labels) != self.p:
            raise DimensionError(f"{len(self.labels)} labels for {self.p} centroids")

    @property
    def p(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (self.method == other.method and self.labels == other.labels
                and self.built_with_stop_words == other.built_with_stop_words
                and self.built_contextualized == other.built_contextualized
                and self.centroids.shape == other.centroids.shape
                and self.centroids.tobytes() == other.centroids.tobytes())


@dataclass(eq=False)
class ConceptPool:
    vectors: np.ndarray
    words: list[str | None]
    stop_flags: np.ndarray
    contextualized: bool = False
    stop_words_excluded: bool = False

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ConceptPool):
            return NotImplemented
        return (self.words == other.words and np.array_equal(self.stop_flags, other.stop_flags)
                and np.array_equal(self.vectors, other.vectors))


def build_pool(packs: Sequence[FeaturePack], target_size: int = DEFAULT_POOL_SIZE,
               exclude_stop_words: bool = False, seed: int = 0) -> ConceptPool:
    """Collect every concept of ``packs`` and downsample uniformly to ``target_size``."""
    if not packs:
        raise ConfigError("build_pool needs at least one feature pack")
    if target_size < 1:
        raise ConfigError(f"target_size must be positive, got {target_size}")
    dims = {p.dim for p in packs}
    if len(dims) != 1:
        raise DimensionError(f"packs disagree on dimensionality: {sorted(dims)}")
    vecs, words, stops = [], [], []
    for pack in packs:
        for item in pack.items:
            for c in item.concepts:
                if exclude_stop_words and c.is_stop_word:
                    continue
                vecs.append(c.vector)
                words.append(c.word)
                stops.append(c.is_stop_word)
    if not vecs:
        raise EmptyPoolError("concept pool is empty after filtering")
    vectors = np.stack(vecs)
    stops = np.asarray(stops, dtype=bool)
    if len(vecs) > target_size:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(vecs), size=target_size, replace=False))
        vectors = vectors[keep]
        stops = stops[keep]
        words = [words[i] for i in keep]
    return ConceptPool(vectors, words, stops, all(p.contextualized for p in packs), exclude_stop_words)


# -- kmeans --------------------------------------------------------------------------


def squared_distances(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Pairwise squared L2 distances, clipped at zero."""
    d2 = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def kmeans_objective(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = x - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeans_plus_plus(x: np.ndarray, p: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = squared_distances(x, x[chosen])[:, 0]
    for _ in range(1, p):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a chosen center; fall back to any unchosen row
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        closest = np.minimum(closest, squared_distances(x, x[idx:idx + 1])[:, 0])
    return x[chosen].copy()


def lloyd(x: np.ndarray, centroids: np.ndarray, max_iters: int = 100, tol: float = 1e-4):
    """Lloyd iterations from the given centroids.

    Returns ``(centroids, labels, objective_history)``.  The objective recorded at
    each iteration is measured right after the assignment step.  Empty clusters are
    reseeded with the points lying farthest from their updated centroid.
    """
    c = centroids.astype(np.float64, copy=True)
    p = c.shape[0]
    history: list[float] = []
    labels = np.zeros(x.shape[0], dtype=np.int64)
    for _ in range(max_iters):
        labels = np.argmin(squared_distances(x, c), axis=1)
        history.append(kmeans_objective(x, c, labels))

        counts = np.bincount(labels, minlength=p)
        sums = np.zeros_like(c)
        np.add.at(sums, labels, x)
        new = c.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            gaps = ((x - new[labels]) ** 2).sum(1)
            far = np.argsort(-gaps, kind="stable")[:empty.size]
            new[empty] = x[far]
            log.debug("reseeded %d empty clusters", empty.size)

        shift = np.sqrt(((new - c) ** 2).sum(1)).max()
        c = new
        if shift < tol:
            break
    labels = np.argmin(squared_distances(x, c), axis=1)
    final = kmeans_objective(x, c, labels)
    if final < history[-1]:
        history.append(final)
    return c, labels, history


def kmeans(pool: ConceptPool | np.ndarray, p: int = DEFAULT_P, seed: int = 0,
           max_iters: int = 100, tol: float = 1e-4) -> Codebook:
    """Cluster the pool into ``p`` centroids (kmeans++ seeding, Lloyd refinement)."""
    if isinstance(pool, ConceptPool):
        x = pool.vectors
        with_stops = not pool.stop_words_excluded
        contextualized = pool.contextualized
    else:
        x, with_stops, contextualized = pool, True, False
    x = np.asarray(x, dtype=np.float64)
    if p < 1:
        raise ConfigError(f"p must be positive, got {p}")
    if x.shape[0] < p:
        raise InsufficientDataError(f"pool has {x.shape[0]} concepts, fewer than p={p}")
    rng = np.random.default_rng(seed)
    init = kmeans_plus_plus(x, p, rng)
    centroids, _, history = lloyd(x, init, max_iters, tol)
    return Codebook(centroids, CodebookMethod.KMEANS, None, with_stops, contextualized, history)


# -- word-frequency codebook ---------------------------------------------------------


def read_word_list(path: str | Path) -> set[str]:
    """One token per line; blank lines and surrounding whitespace ignored."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read word list {path}: {exc}") from exc
    return {line.strip() for line in text.splitlines() if line.strip()}


def count_words(packs: Iterable[FeaturePack]) -> Counter:
    counts: Counter = Counter()
    for pack in packs:
        for item in pack.items:
            counts.update(c.word for c in item.concepts if c.word is not None)
    return counts


def build_word_codebook(packs: Sequence[FeaturePack], p: int = DEFAULT_P,
                        dictionary: set[str] | None = None,
                        stop_words: set[str] = frozenset()) -> Codebook:
    """Codebook of the ``p`` most frequent dictionary words that are not stop words.

    Each word's centroid is the mean of all concept vectors labelled with it.
    Frequency ties go to the lexicographically smaller word.
    """
    if any(pack.modality is not Modality.SENTENCE for pack in packs):
        raise ConfigError("word codebooks are built from sentence packs only")
    counts = count_words(packs)
    eligible = [(w, n) for w, n in counts.items()
                if (dictionary is None or w in dictionary) and w not in stop_words]
    if len(eligible) < p:
        raise InsufficientDataError(f"only {len(eligible)} qualifying words, need p={p}")
    eligible.sort(key=lambda wn: (-wn[1], wn[0]))
    labels = [w for w, _ in eligible[:p]]
    slot = {w: k for k, w in enumerate(labels)}

    dim = packs[0].dim
    sums = np.zeros((p, dim))
    for pack in packs:
        for item in pack.items:
            for c in item.concepts:
                k = slot.get(c.word)
                if k is not None:
                    sums[k] += c.vector
    centroids = sums / np.array([counts[w] for w in labels], dtype=np.float64)[:, None]
    return Codebook(centroids, CodebookMethod.WORD_FREQUENCY, labels,
                    built_with_stop_words=False,
                    built_contextualized=all(pk.contextualized for pk in packs))


# -- persistence ---------------------------------------------------------------------


def encode_codebook(cb: Codebook) -> bytes:
    flags = (1 if cb.built_with_stop_words else 0) | (2 if cb.built_contextualized else 0)
    out = [CODEBOOK_MAGIC, struct.pack("<HBIIB", CODEBOOK_VERSION, _METHOD_CODES[cb.method],
                                       cb.p, cb.dim, flags)]
    for k in range(cb.p):
        out.append(pack_str(cb.labels[k] if cb.labels is not None else None))
        out.append(cb.centroids[k].astype("<f4").tobytes())
    return b"".join(out)


def decode_codebook(buf: bytes) -> Codebook:
    r = Reader(buf)
    if len(buf) < 4 or bytes(r.take(4)) != CODEBOOK_MAGIC:
        raise FormatError("not a codebook file: bad magic")
    version, method, p, dim, flags = r.unpack("<HBIIB")
    if version != CODEBOOK_VERSION:
        raise FormatError(f"unsupported codebook version {version}")
    if method not in _CODE_METHODS:
        raise FormatError(f"unknown codebook method code {method}")
    if p == 0 or dim == 0:
        raise FormatError("codebook declares p=0 or dim=0")
    labels, rows = [], []
    for _ in range(p):
        labels.append(r.string())
        rows.append(r.f32_array(dim))
    if not r.at_end():
        raise FormatError("trailing bytes after last centroid")
    if all(lab is None for lab in labels):
        labels = None
    elif any(lab is None for lab in labels):
        raise FormatError("codebook labels must be all present or all absent")
    return Codebook(np.stack(rows), _CODE_METHODS[method], labels,
                    bool(flags & 1), bool(flags & 2))


def save_codebook(cb: Codebook, path: str | Path) -> None:
    try:
        Path(path).write_bytes(encode_codebook(cb))
    except OSError as exc:
        raise IoError(f"cannot write codebook {path}: {exc}") from exc


def load_codebook(path: str | Path) -> Codebook:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read codebook {path}: {exc}") from exc
    return decode_codebook(buf)
