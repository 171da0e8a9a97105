import csv
import io
import json

import numpy as np
import pytest

from xmodal.errors import ConfigError, UnknownIdError
from xmodal.evaluation import (EvalReport, GroundTruth, PipelineConfig, Task, evaluate,
                               evaluate_exact, recall_at_k, reports_to_csv, reports_to_json,
                               rerank, run_retrieval, sparsity_sweep)
from xmodal.index import DenseStore, build_index, query_topk
from xmodal.transforms import SparseVector

from oracles import count_recall, cosine_matrix, dense_sq, pipeline_recall10, rank_rows


def _truth(n=12):
    return GroundTruth({f"s{i}": f"i{i}" for i in range(n)}, [f"i{i}" for i in range(n)])


def _at_rank(pos, n=12):
    # truth of query s{i} placed at 0-based position ``pos`` among distractors
    out = {}
    for i in range(n):
        others = [f"i{j}" for j in range(n) if j != i]
        out[f"s{i}"] = others[:pos] + [f"i{i}"] + others[pos:]
    return out


class TestRecall:
    def test_perfect(self):
        rep = recall_at_k(_at_rank(0), _truth(), Task.IMAGE_RETRIEVAL)
        assert rep.recall == {1: 100.0, 5: 100.0, 10: 100.0}
        assert rep.queries == 12

    def test_rank_six(self):
        rep = recall_at_k(_at_rank(5), _truth(), Task.IMAGE_RETRIEVAL)
        assert rep.recall == {1: 0.0, 5: 0.0, 10: 100.0}

    def test_empty_ranking_is_miss(self):
        ranks = _at_rank(0)
        ranks["s0"] = []
        rep = recall_at_k(ranks, _truth(), Task.IMAGE_RETRIEVAL, [1])
        assert rep.recall[1] == pytest.approx(100 * 11 / 12)

    def test_unknown_query(self):
        with pytest.raises(UnknownIdError):
            recall_at_k({"nope": ["i0"]}, _truth(), Task.IMAGE_RETRIEVAL)

    def test_sentence_hit_rules(self):
        truth = GroundTruth({"a0": "A", "a1": "A", "b0": "B"})
        ranks = {"A": ["a1", "b0", "a0"], "B": ["a0", "b0", "a1"]}
        any_ = recall_at_k(ranks, truth, Task.SENTENCE_RETRIEVAL, [1, 2])
        first = recall_at_k(ranks, truth, Task.SENTENCE_RETRIEVAL, [1, 2], hit_rule="first")
        assert any_.recall == {1: 50.0, 2: 100.0}
        assert first.recall == {1: 0.0, 2: 50.0}

    def test_counting_oracle(self, small_packs):
        images, sentences = small_packs
        qs = sentences.items[:100]
        scores = cosine_matrix(np.stack([s.global_vector for s in qs]), images.global_matrix())
        ranked = [[images.ids[j] for j in row] for row in rank_rows(scores)]
        rep = recall_at_k(dict(zip([s.id for s in qs], ranked)),
                          GroundTruth.from_packs(images, sentences), Task.IMAGE_RETRIEVAL)
        for k in (1, 5, 10):
            assert rep.recall[k] == count_recall(ranked, [{s.group} for s in qs], k)

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            recall_at_k(_at_rank(0), _truth(), Task.IMAGE_RETRIEVAL, [0])


class TestRetrieval:
    def _index(self):
        return build_index([("a", SparseVector.from_pairs(3, [(0, 1)])),
                            ("b", SparseVector.from_pairs(3, [(0, 1), (1, 1)]))])

    def test_singleton(self):
        q = SparseVector.from_pairs(3, [(1, 2)])
        assert run_retrieval(self._index(), [("q", q)], 5) == {"q": ["b"]}

    def test_empty_query(self):
        assert run_retrieval(self._index(), [("q", SparseVector.empty(3))], 5) == {"q": []}

    @pytest.mark.parametrize("workers", [1, 4])
    def test_matches_manual_calls(self, workers):
        rng = np.random.default_rng(0)
        index = self._index()
        queries = [(f"q{i}", SparseVector.from_dense(rng.integers(0, 3, 3).astype(float)))
                   for i in range(20)]
        got = run_retrieval(index, queries, 2, workers=workers)
        assert got == {qid: [i for i, _ in query_topk(index, q, 2)] for qid, q in queries}


class TestRerank:
    def test_validation(self):
        with pytest.raises(ConfigError):
            rerank({}, DenseStore(["a"], [[1.0]]), {}, 0, 10)
        with pytest.raises(ConfigError):
            rerank({}, DenseStore(["a"], [[1.0]]), {}, 1, 0)

    def test_reorders_prefix_only(self):
        store = DenseStore(["a", "b", "c"], [[1, 0], [0.6, 0.8], [0, 1]])
        out = rerank({"q": ["c", "b", "a"]}, store, {"q": np.array([1.0, 0.0])}, 1, 2)
        assert out == {"q": ["b", "c"]}


def _find(reports, task, r_m=None):
    return next(r for r in reports if r.task is task and r.r_m == r_m)


class TestPipeline:
    def test_rerank_full_corpus_limit(self, small_packs):
        images, sentences = small_packs
        cfg = PipelineConfig("scalar_quantization")
        big = len(sentences.items)
        reports = evaluate(images, sentences, cfg, 0.99, ks=[10], rm_list=[1, big])
        exact = evaluate_exact(images, sentences, ks=[10])
        for task in Task:
            assert _find(reports, task, big).recall == _find(exact, task).recall
            # R_m = 1 only reorders the top-K set
            assert _find(reports, task, 1).recall == _find(reports, task).recall

    def test_oracle_pipeline(self, small_packs):
        images, sentences = small_packs
        cfg = PipelineConfig("scalar_quantization")
        # d=16 so c-relu gives 32 components and f=0.9 keeps 3
        reports = evaluate(images, sentences, cfg, 0.9, ks=[10], rm_list=[2, 5])
        oracle = pipeline_recall10(images, sentences, lambda x: dense_sq(x, 1000, 3), [2, 5])
        for (task, r_m), value in oracle.items():
            assert _find(reports, Task(task), r_m).recall[10] == pytest.approx(value, abs=1e-9)

    def test_sweep_zero_equals_baseline(self, small_packs):
        images, sentences = small_packs
        cfg = PipelineConfig("deep_permutation")
        swept = sparsity_sweep(images, sentences, cfg, [0.0])
        base = evaluate(images, sentences, cfg)
        assert len(swept) == 2
        for task in Task:
            assert _find(swept, task).recall == _find(base, task).recall

    def test_sweep_rejects_bad_factor(self, small_packs):
        with pytest.raises(ConfigError):
            sparsity_sweep(*small_packs, PipelineConfig("deep_permutation"), [1.0])

    def test_boc_requires_codebook(self, small_packs):
        with pytest.raises(ConfigError):
            evaluate(*small_packs, PipelineConfig("boc_hard"))


def test_report_serialization():
    rep = EvalReport(Task.IMAGE_RETRIEVAL, {1: 10.0, 5: 20.0, 10: 30.0}, 100, 2,
                     method="scalar_quantization", params={"scale": 1000.0}, sparsity=0.9, r_m=5)
    doc = json.loads(reports_to_json([rep]))
    assert doc == [{"task": "image_retrieval", "method": "scalar_quantization",
                    "params": {"scale": 1000.0}, "sparsity": 0.9, "r_m": 5,
                    "recall": {"1": 10.0, "5": 20.0, "10": 30.0}, "queries": 100,
                    "unretrievable": 2}]
    rows = list(csv.reader(io.StringIO(reports_to_csv([rep]))))
    assert rows[0] == ["task", "method", "sparsity", "r_m", "k", "recall"]
    assert rows[1:] == [["image_retrieval", "scalar_quantization", "0.9", "5", str(k), str(v)]
                        for k, v in [(1, 10.0), (5, 20.0), (10, 30.0)]]
