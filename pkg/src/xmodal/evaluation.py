"""Recall@K evaluation for image and sentence retrieval, re-ranking and sparsity sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .boc import Aggregation, Assignment, BocConfig, encode_pack
from .codebook import Codebook
from .errors import ConfigError, UnknownIdError
from .features import FeaturePack
from .index import DenseStore, InvertedIndex, build_index, exact_topk, query_topk
from .transforms import SparseVector, TransformConfig, keep_z_for_sparsity, transform_vector

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)
DEFAULT_SCALE = 1000.0

Rankings = dict[str, list[str]]


class Task(str, Enum):
    IMAGE_RETRIEVAL = "image_retrieval"
    SENTENCE_RETRIEVAL = "sentence_retrieval"


class HitRule(str, Enum):
    ANY = "any"
    FIRST = "first"


class PipelineMethod(str, Enum):
    DEEP_PERMUTATION = "deep_permutation"
    SCALAR_QUANTIZATION = "scalar_quantization"
    BOC_HARD = "boc_hard"
    BOC_SOFT = "boc_soft"

    @property
    def is_global(self) -> bool:
        return self in (PipelineMethod.DEEP_PERMUTATION, PipelineMethod.SCALAR_QUANTIZATION)


class GroundTruth:
    """Sentence -> image links, taken from the ``group`` field of sentence items."""

    def __init__(self, sentence_to_image: Mapping[str, str], image_ids: Iterable[str] | None = None):
        self.sentence_to_image = dict(sentence_to_image)
        self.image_to_sentences: dict[str, list[str]] = {}
        if image_ids is not None:
            for img in image_ids:
                self.image_to_sentences[img] = []
        for sent, img in self.sentence_to_image.items():
            self.image_to_sentences.setdefault(img, []).append(sent)
        bare = [img for img, sents in self.image_to_sentences.items() if not sents]
        if bare:
            raise ConfigError(f"{len(bare)} images have no sentence (first: {bare[0]!r})")

    @classmethod
    def from_packs(cls, images: FeaturePack, sentences: FeaturePack) -> "GroundTruth":
        links = {}
        image_ids = set(images.ids)
        for item in sentences.items:
            if item.group is None:
                raise ConfigError(f"sentence {item.id!r} has no group; evaluation needs one")
            if item.group not in image_ids:
                raise UnknownIdError(f"sentence {item.id!r} points at unknown image {item.group!r}")
            links[item.id] = item.group
        return cls(links, images.ids)

    def relevant(self, query_id: str, task: Task, hit_rule: HitRule = HitRule.ANY) -> set[str]:
        if task is Task.IMAGE_RETRIEVAL:
            try:
                return {self.sentence_to_image[query_id]}
            except KeyError:
                raise UnknownIdError(f"unknown sentence query {query_id!r}") from None
        try:
            sents = self.image_to_sentences[query_id]
        except KeyError:
            raise UnknownIdError(f"unknown image query {query_id!r}") from None
        return set(sents) if hit_rule is HitRule.ANY else {sents[0]}


@dataclass
class EvalReport:
    task: Task
    recall: dict[int, float]
    queries: int
    unretrievable: int = 0
    method: str = "exact"
    params: dict = field(default_factory=dict)
    sparsity: float | None = None
    r_m: int | None = None

    def to_json(self) -> dict:
        return {
            "task": Task(self.task).value,
            "method": self.method,
            "params": self.params,
            "sparsity": self.sparsity,
            "r_m": self.r_m,
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "queries": self.queries,
            "unretrievable": self.unretrievable,
        }

    def csv_rows(self) -> list[list]:
        return [[Task(self.task).value, self.method, self.sparsity, self.r_m, k, v]
                for k, v in sorted(self.recall.items())]


CSV_HEADER = ["task", "method", "sparsity", "r_m", "k", "recall"]


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for rep in reports:
        for row in rep.csv_rows():
            w.writerow(["" if x is None else x for x in row])
    return buf.getvalue()


def reports_to_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps([r.to_json() for r in reports], indent=2) + "\n"


def recall_at_k(rankings: Mapping[str, Sequence[str]], truth: GroundTruth, task: Task,
                ks: Sequence[int] = DEFAULT_KS, hit_rule: HitRule = HitRule.ANY,
                unretrievable: int = 0, **meta) -> EvalReport:
    """Percentage of queries with a relevant item among their first K results.

    A query whose ranking is empty (e.g. its vector sparsified to nothing) is a
    miss at every K.
    """
    task, hit_rule = Task(task), HitRule(hit_rule)
    ks = sorted(set(ks))
    if not ks or ks[0] < 1:
        raise ConfigError(f"K values must be positive, got {ks}")
    hits = dict.fromkeys(ks, 0)
    for qid, ranked in rankings.items():
        relevant = truth.relevant(qid, task, hit_rule)
        first = next((pos for pos, item in enumerate(ranked) if item in relevant), None)
        if first is None:
            continue
        for k in ks:
            if first < k:
                hits[k] += 1
    n = len(rankings)
    recall = {k: (100.0 * hits[k] / n if n else 0.0) for k in ks}
    return EvalReport(task, recall, n, unretrievable, **meta)


def _threads() -> int:
    raw = os.environ.get("XMODAL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"XMODAL_THREADS must be an integer, got {raw!r}") from None
    return n if n > 0 else (os.cpu_count() or 1)


def run_retrieval(index: InvertedIndex, queries: Sequence[tuple[str, SparseVector]], k_max: int,
                  *, exhaustive: bool = False, workers: int | None = None) -> Rankings:
    """Apply :func:`query_topk` to every query; empty queries get empty rankings."""
    workers = _threads() if workers is None else workers

    def one(entry):
        qid, vec = entry
        return qid, [i for i, _ in query_topk(index, vec, k_max, exhaustive=exhaustive)]

    if workers > 1 and len(queries) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return dict(pool.map(one, queries))
    return dict(map(one, queries))


def rerank(approx: Mapping[str, Sequence[str]], store: DenseStore,
           queries_dense: Mapping[str, np.ndarray], r_m: int, k: int) -> Rankings:
    """Re-order the first ``r_m * k`` approximate results of each query by exact cosine."""
    if r_m < 1 or k < 1:
        raise ConfigError(f"r_m and k must be >= 1, got r_m={r_m}, k={k}")
    depth = r_m * k
    out = {}
    for qid, ranked in approx.items():
        cand = list(ranked[:depth])
        if not cand:
            out[qid] = []
            continue
        out[qid] = [i for i, _ in exact_topk(store, queries_dense[qid], len(cand), restrict_to=cand)]
    return out


def exact_rankings(store: DenseStore, queries_dense: Mapping[str, np.ndarray], k: int) -> Rankings:
    return {qid: [i for i, _ in exact_topk(store, q, k)] for qid, q in queries_dense.items()}


# -- full pipeline -------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to turn two packs into indexable sparse vectors."""

    method: PipelineMethod
    scale: float = DEFAULT_SCALE
    apply_crelu: bool = True
    aggregation: Aggregation = Aggregation.SUM
    row_keep_z: int | None = None
    exclude_stop_words_at_indexing: bool = False
    paper_literal_similarity: bool = False
    hit_rule: HitRule = HitRule.ANY

    def __post_init__(self):
        object.__setattr__(self, "method", PipelineMethod(self.method))
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))
        object.__setattr__(self, "hit_rule", HitRule(self.hit_rule))
        if self.method is PipelineMethod.SCALAR_QUANTIZATION and not self.scale > 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")

    def params(self) -> dict:
        out: dict = {"hit_rule": self.hit_rule.value}
        if self.method.is_global:
            out["apply_crelu"] = self.apply_crelu
            if self.method is PipelineMethod.SCALAR_QUANTIZATION:
                out["scale"] = self.scale
        else:
            out["exclude_stop_words_at_indexing"] = self.exclude_stop_words_at_indexing
            if self.method is PipelineMethod.BOC_SOFT:
                out["aggregation"] = self.aggregation.value
                out["paper_literal_similarity"] = self.paper_literal_similarity
                if self.row_keep_z is not None:
                    out["row_keep_z"] = self.row_keep_z
        return out

    def transform_config(self, dim: int, sparsity: float | None) -> TransformConfig:
        out_dim = 2 * dim if self.apply_crelu else dim
        keep_z = None if sparsity is None else keep_z_for_sparsity(sparsity, out_dim)
        scale = self.scale if self.method is PipelineMethod.SCALAR_QUANTIZATION else None
        return TransformConfig(self.method.value, keep_z, scale, self.apply_crelu)

    def boc_config(self, p: int, sparsity: float | None) -> BocConfig:
        if self.method is PipelineMethod.BOC_HARD:
            if sparsity:
                raise ConfigError("hard assignment has no sparsity knob")
            return BocConfig(Assignment.HARD,
                             exclude_stop_words_at_indexing=self.exclude_stop_words_at_indexing)
        if sparsity is not None:
            row_z = keep_z_for_sparsity(sparsity, p)
        else:
            row_z = self.row_keep_z if self.row_keep_z is not None else p
        return BocConfig(Assignment.SOFT, self.aggregation, row_z,
                         self.exclude_stop_words_at_indexing, self.paper_literal_similarity)


def encode_side(pack: FeaturePack, cfg: PipelineConfig, sparsity: float | None = None,
                codebook: Codebook | None = None) -> list[tuple[str, SparseVector]]:
    """Encode every item of a pack with the configured method."""
    if cfg.method.is_global:
        tcfg = cfg.transform_config(pack.dim, sparsity)
        return [(item.id, transform_vector(v, tcfg))
                for item, v in zip(pack.items, pack.global_matrix())]
    if codebook is None:
        raise ConfigError(f"method {cfg.method.value} needs a codebook")
    return encode_pack(pack, codebook, cfg.boc_config(codebook.p, sparsity))


@dataclass
class SideData:
    """One retrieval direction: corpus vectors, query vectors and dense stores."""

    task: Task
    corpus: FeaturePack
    queries: FeaturePack


def _sides(images: FeaturePack, sentences: FeaturePack) -> list[SideData]:
    return [SideData(Task.IMAGE_RETRIEVAL, images, sentences),
            SideData(Task.SENTENCE_RETRIEVAL, sentences, images)]


def _unretrievable(query_vecs, indexed: set[str], truth: GroundTruth, task: Task,
                   hit_rule: HitRule) -> int:
    n = 0
    for qid, vec in query_vecs:
        if vec.nnz == 0 or not (truth.relevant(qid, task, hit_rule) & indexed):
            n += 1
    return n


def evaluate_exact(images: FeaturePack, sentences: FeaturePack, ks: Sequence[int] = DEFAULT_KS,
                   hit_rule: HitRule = HitRule.ANY) -> list[EvalReport]:
    """Baseline: exact cosine over the original global vectors, both directions."""
    truth = GroundTruth.from_packs(images, sentences)
    reports = []
    for side in _sides(images, sentences):
        store = DenseStore.from_pack(side.corpus)
        qd = dict(zip(side.queries.ids, side.queries.global_matrix()))
        ranks = exact_rankings(store, qd, max(ks))
        reports.append(recall_at_k(ranks, truth, side.task, ks, hit_rule,
                                   method="exact", params={"hit_rule": HitRule(hit_rule).value}))
    return reports


def evaluate(images: FeaturePack, sentences: FeaturePack, cfg: PipelineConfig,
             sparsity: float | None = None, ks: Sequence[int] = DEFAULT_KS,
             rm_list: Sequence[int] = (), codebook: Codebook | None = None,
             truth: GroundTruth | None = None, workers: int | None = None) -> list[EvalReport]:
    """Encode both packs, index the corpus side and evaluate both directions.

    Approximate rankings are prefixes of the exhaustive sparse-cosine ranking of the
    indexed corpus (items scoring 0 follow by ascending id).  Corpus items whose
    vector is empty are left out of the index and so can never be retrieved.
    For every ``r_m`` in ``rm_list`` an extra report holds, for each K, the
    Recall@K after re-ranking the first ``r_m * K`` results by exact cosine on the
    original global vectors.
    """
    truth = truth or GroundTruth.from_packs(images, sentences)
    ks = sorted(set(ks))
    encoded = {
        "image": encode_side(images, cfg, sparsity, codebook),
        "sentence": encode_side(sentences, cfg, sparsity, codebook),
    }
    reports = []
    for side in _sides(images, sentences):
        corpus_key = "image" if side.task is Task.IMAGE_RETRIEVAL else "sentence"
        query_key = "sentence" if corpus_key == "image" else "image"
        corpus_vecs = [(i, v) for i, v in encoded[corpus_key] if v.nnz]
        query_vecs = encoded[query_key]
        dim = encoded[corpus_key][0][1].dim if encoded[corpus_key] else 1
        index = build_index(corpus_vecs, side.corpus.modality.value, dim=dim)
        depth = max(ks) * max([1, *rm_list])
        depth = max(1, min(depth, len(index)))
        approx = run_retrieval(index, query_vecs, depth, exhaustive=True, workers=workers)
        lost = _unretrievable(query_vecs, set(index.ids), truth, side.task, cfg.hit_rule)
        meta = dict(method=cfg.method.value, params=cfg.params(), sparsity=sparsity)
        reports.append(recall_at_k({q: r[:max(ks)] for q, r in approx.items()}, truth,
                                   side.task, ks, cfg.hit_rule, lost, **meta))
        if rm_list:
            store = DenseStore.from_pack(side.corpus)
            qd = dict(zip(side.queries.ids, side.queries.global_matrix()))
            for r_m in rm_list:
                recall = {}
                for k in ks:
                    rr = rerank(approx, store, qd, r_m, k)
                    recall[k] = recall_at_k(rr, truth, side.task, [k], cfg.hit_rule).recall[k]
                reports.append(EvalReport(side.task, recall, len(query_vecs), lost,
                                          r_m=r_m, **meta))
    return reports


def sparsity_sweep(images: FeaturePack, sentences: FeaturePack, cfg: PipelineConfig,
                   factors: Sequence[float], ks: Sequence[int] = DEFAULT_KS,
                   codebook: Codebook | None = None, workers: int | None = None) -> list[EvalReport]:
    """One report per (sparsity factor, task); each factor rebuilds vectors and index."""
    if cfg.method is PipelineMethod.BOC_HARD:
        raise ConfigError("sparsity sweeps apply to global methods and soft BoC only")
    for f in factors:
        if not 0.0 <= f < 1.0:
            raise ConfigError(f"sparsity factor must lie in [0, 1), got {f}")
    truth = GroundTruth.from_packs(images, sentences)
    reports = []
    for f in factors:
        log.info("sparsity %.4g", f)
        reports.extend(evaluate(images, sentences, cfg, f, ks, codebook=codebook,
                                truth=truth, workers=workers))
    return reports
