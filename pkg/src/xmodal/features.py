"""Feature packs: the in-memory model, the ``XMFP`` binary format and a synthetic generator.

A feature pack holds the items of one modality (images or sentences).  Each item
may carry a global descriptor and a variable-length list of concept vectors
(image regions or sentence words).  Vectors are kept as ``float32`` so that the
on-disk format round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from ._binio import Reader, pack_str
from .errors import ConfigError, DimensionError, DuplicateIdError, FormatError, IoError

PACK_MAGIC = b"XMFP"
PACK_VERSION = 1

STOP_WORDS = ("a", "an", "the", "of", "on", "in", "with", "and", "is", "at")


class Modality(str, Enum):
    IMAGE = "image"
    SENTENCE = "sentence"


_MODALITY_CODES = {Modality.IMAGE: 0, Modality.SENTENCE: 1}
_CODE_MODALITIES = {v: k for k, v in _MODALITY_CODES.items()}


def _same_array(a: np.ndarray | None, b: np.ndarray | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(eq=False)
class Concept:
    vector: np.ndarray
    word: str | None = None
    is_stop_word: bool = False

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.is_stop_word and self.word is None:
            raise ValueError("a stop-word concept must carry its word")

    def __eq__(self, other):
        if not isinstance(other, Concept):
            return NotImplemented
        return (self.word == other.word and self.is_stop_word == other.is_stop_word
                and _same_array(self.vector, other.vector))


@dataclass(eq=False)
class Item:
    id: str
    global_vector: np.ndarray | None = None
    concepts: list[Concept] = field(default_factory=list)
    group: str | None = None

    def __post_init__(self):
        if self.global_vector is not None:
            self.global_vector = np.asarray(self.global_vector, dtype=np.float32)

    @property
    def n_concepts(self) -> int:
        return len(self.concepts)

    def concept_matrix(self, drop_stop_words: bool = False) -> np.ndarray:
        """Stack the concept vectors into an ``(n_i, d)`` float32 array."""
        vecs = [c.vector for c in self.concepts if not (drop_stop_words and c.is_stop_word)]
        if not vecs:
            d = self.global_vector.shape[0] if self.global_vector is not None else 0
            if self.concepts:
                d = self.concepts[0].vector.shape[0]
            return np.zeros((0, d), dtype=np.float32)
        return np.stack(vecs)

    def __eq__(self, other):
        if not isinstance(other, Item):
            return NotImplemented
        return (self.id == other.id and self.group == other.group
                and _same_array(self.global_vector, other.global_vector)
                and self.concepts == other.concepts)


@dataclass(eq=False)
class FeaturePack:
    modality: Modality
    dim: int
    items: list[Item] = field(default_factory=list)
    contextualized: bool = False
    source: str = ""

    def __post_init__(self):
        self.modality = Modality(self.modality)

    def validate(self) -> None:
        if self.dim < 1:
            raise DimensionError(f"pack dimensionality must be positive, got {self.dim}")
        seen = set()
        for item in self.items:
            if not item.id:
                raise FormatError("item ids must be non-empty")
            if item.id in seen:
                raise DuplicateIdError(f"duplicate item id {item.id!r}")
            seen.add(item.id)
            if item.global_vector is not None and item.global_vector.shape != (self.dim,):
                raise DimensionError(
                    f"item {item.id!r}: global vector has shape {item.global_vector.shape}, "
                    f"expected ({self.dim},)")
            for k, c in enumerate(item.concepts):
                if c.vector.shape != (self.dim,):
                    raise DimensionError(
                        f"item {item.id!r}: concept {k} has shape {c.vector.shape}, "
                        f"expected ({self.dim},)")
                if c.is_stop_word and c.word is None:
                    raise FormatError(f"item {item.id!r}: stop-word concept {k} has no word")

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self.items]

    def item(self, item_id: str) -> Item:
        for it in self.items:
            if it.id == item_id:
                return it
        raise KeyError(item_id)

    def global_matrix(self) -> np.ndarray:
        """Global vectors as an ``(N, d)`` array; raises if any item lacks one."""
        missing = [it.id for it in self.items if it.global_vector is None]
        if missing:
            raise DimensionError(f"{len(missing)} items have no global vector (first: {missing[0]!r})")
        if not self.items:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([it.global_vector for it in self.items])

    def __eq__(self, other):
        if not isinstance(other, FeaturePack):
            return NotImplemented
        return (self.modality == other.modality and self.dim == other.dim
                and self.contextualized == other.contextualized
                and self.items == other.items)


# -- binary format -------------------------------------------------------------------


def encode_feature_pack(pack: FeaturePack) -> bytes:
    pack.validate()
    flags = 1 if pack.contextualized else 0
    out = [PACK_MAGIC, struct.pack("<HBBIQ", PACK_VERSION, _MODALITY_CODES[pack.modality],
                                   flags, pack.dim, len(pack.items))]
    for item in pack.items:
        out.append(pack_str(item.id))
        out.append(pack_str(item.group))
        if item.global_vector is None:
            out.append(b"\x00")
        else:
            out.append(b"\x01")
            out.append(item.global_vector.astype("<f4").tobytes())
        out.append(struct.pack("<I", len(item.concepts)))
        for c in item.concepts:
            out.append(pack_str(c.word))
            out.append(struct.pack("<B", 1 if c.is_stop_word else 0))
            out.append(c.vector.astype("<f4").tobytes())
    return b"".join(out)


def decode_feature_pack(buf: bytes, source: str = "") -> FeaturePack:
    r = Reader(buf)
    if len(buf) < 4 or bytes(r.take(4)) != PACK_MAGIC:
        raise FormatError("not a feature pack: bad magic")
    version, mod_code, flags, dim, count = r.unpack("<HBBIQ")
    if version != PACK_VERSION:
        raise FormatError(f"unsupported feature pack version {version}")
    if mod_code not in _CODE_MODALITIES:
        raise FormatError(f"unknown modality code {mod_code}")
    if dim == 0:
        raise FormatError("feature pack declares dim=0")
    items = []
    for _ in range(count):
        item_id = r.string()
        if item_id is None:
            raise FormatError("empty item id")
        group = r.string()
        has_global = r.u8()
        if has_global not in (0, 1):
            raise FormatError(f"item {item_id!r}: bad has_global byte {has_global}")
        gvec = r.f32_array(dim) if has_global else None
        n = r.u32()
        concepts = []
        for _ in range(n):
            word = r.string()
            stop = r.u8()
            if stop and word is None:
                raise FormatError(f"item {item_id!r}: stop-word concept without word")
            concepts.append(Concept(r.f32_array(dim), word, bool(stop)))
        items.append(Item(item_id, gvec, concepts, group))
    if not r.at_end():
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last item")
    pack = FeaturePack(_CODE_MODALITIES[mod_code], dim, items, bool(flags & 1), source)
    pack.validate()
    return pack


def write_feature_pack(pack: FeaturePack, path: str | Path) -> None:
    data = encode_feature_pack(pack)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write feature pack to {path}: {exc}") from exc


def load_feature_pack(path: str | Path) -> FeaturePack:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read feature pack {path}: {exc}") from exc
    return decode_feature_pack(buf, source=str(path))


# -- synthetic generator -------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the topic-mixture generator.

    Each image owns ``topics_per_image`` latent slots.  A slot is a topic centroid
    shifted by an image-specific offset (``instance_spread``), which is what makes
    two images about the same topic distinguishable.  Concepts are unit-normalised
    noisy copies of the slots (``noise_sigma`` per component); the captions of an
    image draw from the same slots with independent noise.
    """

    n_images: int
    dim: int
    topics: int
    noise_sigma: float
    concepts_per_image: tuple[int, int]
    concepts_per_sentence: tuple[int, int]
    seed: int
    captions_per_image: int = 5
    topics_per_image: int = 2
    instance_spread: float = 0.3
    stop_word_rate: float = 0.0
    words_per_topic: int = 5
    contextualized: bool = True

    REQUIRED = ("n_images", "dim", "topics", "noise_sigma", "concepts_per_image",
                "concepts_per_sentence", "seed")

    def __post_init__(self):
        for name in ("n_images", "dim", "topics"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.captions_per_image <= 0:
            raise ConfigError(f"captions_per_image must be positive, got {self.captions_per_image}")
        if self.topics_per_image <= 0:
            raise ConfigError(f"topics_per_image must be positive, got {self.topics_per_image}")
        if self.words_per_topic <= 0:
            raise ConfigError(f"words_per_topic must be positive, got {self.words_per_topic}")
        if self.noise_sigma < 0 or self.instance_spread < 0:
            raise ConfigError("noise_sigma and instance_spread must be non-negative")
        if not 0.0 <= self.stop_word_rate <= 1.0:
            raise ConfigError(f"stop_word_rate must lie in [0, 1], got {self.stop_word_rate}")
        for name in ("concepts_per_image", "concepts_per_sentence"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} must be [min, max] with 0 <= min <= max, got {[lo, hi]}")

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        for key in cls.REQUIRED:
            if key not in raw:
                raise ConfigError(f"synthetic config is missing key {key!r}")
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown synthetic config key {unknown[0]!r}")
        kwargs = dict(raw)
        for key in ("concepts_per_image", "concepts_per_sentence"):
            val = kwargs[key]
            if not isinstance(val, (list, tuple)) or len(val) != 2:
                raise ConfigError(f"{key!r} must be a [min, max] pair")
            kwargs[key] = (int(val[0]), int(val[1]))
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("synthetic config must be a JSON object")
        return cls.from_dict(raw)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norms == 0, 1.0, norms)


def topic_words(topic: int, words_per_topic: int) -> list[str]:
    return [f"t{topic:03d}w{k:02d}" for k in range(words_per_topic)]


def generate_synthetic(config: SyntheticConfig) -> tuple[FeaturePack, FeaturePack]:
    """Build an (images, sentences) pair with controlled cross-modal correlation."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    d = cfg.dim
    centroids = _unit_rows(rng.standard_normal((cfg.topics, d)))
    stop_centroid = _unit_rows(rng.standard_normal(d))
    k_slots = min(cfg.topics_per_image, cfg.topics)
    source = f"synthetic(seed={cfg.seed})"

    def concept_vecs(slots: np.ndarray, which: np.ndarray) -> np.ndarray:
        noise = rng.standard_normal((len(which), d))
        return _unit_rows(slots[which] + cfg.noise_sigma * noise)

    def global_of(vecs: np.ndarray, slots: np.ndarray) -> np.ndarray:
        base = vecs.mean(axis=0) if len(vecs) else slots.mean(axis=0)
        return _unit_rows(base + cfg.noise_sigma * rng.standard_normal(d))

    images, sentences = [], []
    for i in range(cfg.n_images):
        image_id = f"img{i:06d}"
        topics = rng.choice(cfg.topics, size=k_slots, replace=False)
        slots = _unit_rows(centroids[topics] + cfg.instance_spread * rng.standard_normal((k_slots, d)))

        n = int(rng.integers(cfg.concepts_per_image[0], cfg.concepts_per_image[1] + 1))
        vecs = concept_vecs(slots, rng.integers(0, k_slots, size=n))
        images.append(Item(image_id, global_of(vecs, slots), [Concept(v) for v in vecs]))

        for c in range(cfg.captions_per_image):
            n = int(rng.integers(cfg.concepts_per_sentence[0], cfg.concepts_per_sentence[1] + 1))
            which = rng.integers(0, k_slots, size=n)
            is_stop = rng.random(n) < cfg.stop_word_rate
            word_pick = rng.integers(0, cfg.words_per_topic, size=n)
            stop_pick = rng.integers(0, len(STOP_WORDS), size=n)
            vecs = concept_vecs(slots, which)
            if is_stop.any():
                noise = rng.standard_normal((int(is_stop.sum()), d))
                vecs[is_stop] = _unit_rows(stop_centroid + cfg.noise_sigma * noise)
            concepts = []
            for l in range(n):
                if is_stop[l]:
                    concepts.append(Concept(vecs[l], STOP_WORDS[stop_pick[l]], True))
                else:
                    word = topic_words(int(topics[which[l]]), cfg.words_per_topic)[word_pick[l]]
                    concepts.append(Concept(vecs[l], word, False))
            sentences.append(Item(f"{image_id}_s{c}", global_of(vecs, slots), concepts, group=image_id))

    return (FeaturePack(Modality.IMAGE, d, images, cfg.contextualized, source),
            FeaturePack(Modality.SENTENCE, d, sentences, cfg.contextualized, source))
