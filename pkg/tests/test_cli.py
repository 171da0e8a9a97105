import json
import subprocess
import sys

import numpy as np
import pytest

from xmodal.cli import main
from xmodal.codebook import load_codebook
from xmodal.features import (Concept, FeaturePack, Item, Modality, load_feature_pack,
                             write_feature_pack)
from xmodal.index import load_index

from oracles import dense_dp, nearest_histogram, pipeline_recall10

SYNTH = dict(n_images=12, dim=8, topics=4, noise_sigma=0.1, concepts_per_image=[2, 4],
             concepts_per_sentence=[2, 4], seed=1, stop_word_rate=0.2)


@pytest.fixture()
def synth_dir(tmp_path):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps(SYNTH))
    assert main(["synth", str(cfg), "-o", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


def _one_item_pack(path, vector, modality=Modality.IMAGE):
    v = np.asarray(vector, dtype=float)
    write_feature_pack(FeaturePack(modality, v.size, [Item("x", v)]), path)


class TestSynth:
    def test_files_loadable_and_deterministic(self, synth_dir, tmp_path):
        images = load_feature_pack(synth_dir / "images.xmfp")
        sentences = load_feature_pack(synth_dir / "sentences.xmfp")
        assert len(images.items) == 12 and len(sentences.items) == 60
        first = (synth_dir / "images.xmfp").read_bytes()
        assert main(["synth", str(tmp_path / "synth.json"), "-o", str(tmp_path / "again")]) == 0
        assert (tmp_path / "again" / "images.xmfp").read_bytes() == first

    def test_missing_seed(self, tmp_path, capsys):
        raw = dict(SYNTH)
        del raw["seed"]
        (tmp_path / "c.json").write_text(json.dumps(raw))
        assert main(["synth", str(tmp_path / "c.json"), "-o", str(tmp_path)]) == 2
        assert "seed" in capsys.readouterr().err


class TestCodebook:
    def test_kmeans(self, synth_dir, tmp_path):
        packs = [str(synth_dir / "images.xmfp"), str(synth_dir / "sentences.xmfp")]
        out_a, out_b = tmp_path / "a.xmcb", tmp_path / "b.xmcb"
        assert main(["codebook", *packs, "--p", "4", "--seed", "3", "-o", str(out_a)]) == 0
        assert main(["codebook", *packs, "--p", "4", "--seed", "3", "-o", str(out_b)]) == 0
        cb = load_codebook(out_a)
        assert cb.p == 4 and cb.dim == 8
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_p_exceeds_pool(self, synth_dir, tmp_path):
        rc = main(["codebook", str(synth_dir / "images.xmfp"), "--p", "100000",
                   "-o", str(tmp_path / "c.xmcb")])
        assert rc == 2

    def test_word_frequency(self, synth_dir, tmp_path):
        stops = tmp_path / "stop.txt"
        stops.write_text("the\na\nof\nin\non\nwith\nand\nis\n")
        rc = main(["codebook", str(synth_dir / "sentences.xmfp"), "--method", "word_frequency",
                   "--p", "3", "--stopwords", str(stops), "-o", str(tmp_path / "w.xmcb")])
        assert rc == 0
        cb = load_codebook(tmp_path / "w.xmcb")
        assert len(cb.labels) == 3 and not set(cb.labels) & set(stops.read_text().split())


class TestTransform:
    def test_deep_permutation_example(self, tmp_path):
        _one_item_pack(tmp_path / "p.xmfp", [0.2, 0.4, 0.1, 0.3, 0.6])
        rc = main(["transform", str(tmp_path / "p.xmfp"), "--method", "dp", "--no-crelu",
                   "-o", str(tmp_path / "t.xmix")])
        assert rc == 0
        vec = load_index(tmp_path / "t.xmix").vector("x")
        assert vec.pairs() == [(0, 2.0), (1, 4.0), (2, 1.0), (3, 3.0), (4, 5.0)]
        order = [i + 1 for i, _ in sorted(vec.pairs(), key=lambda p: -p[1])]
        assert order == [5, 2, 4, 1, 3]

    def test_scalar_quantization(self, tmp_path):
        _one_item_pack(tmp_path / "p.xmfp", [0.1234, -0.5])
        rc = main(["transform", str(tmp_path / "p.xmfp"), "--method", "sq", "--scale", "1000",
                   "-o", str(tmp_path / "t.xmix")])
        assert rc == 0
        assert load_index(tmp_path / "t.xmix").vector("x").pairs() == [(0, 123.0), (3, 500.0)]

    def test_boc_hard(self, synth_dir, tmp_path):
        sentences = str(synth_dir / "sentences.xmfp")
        cb_path = tmp_path / "c.xmcb"
        main(["codebook", sentences, "--p", "5", "-o", str(cb_path)])
        rc = main(["transform", sentences, "--method", "boc_hard", "--codebook", str(cb_path),
                   "-o", str(tmp_path / "t.xmix")])
        assert rc == 0
        seg = load_index(tmp_path / "t.xmix")
        cents = load_codebook(cb_path).centroids.astype(np.float64)
        for item in load_feature_pack(sentences).items:
            want = nearest_histogram(item.concept_matrix(), cents)
            np.testing.assert_array_equal(seg.vector(item.id).to_dense(), want)

    def test_boc_without_codebook(self, synth_dir, tmp_path):
        rc = main(["transform", str(synth_dir / "images.xmfp"), "--method", "boc_hard",
                   "-o", str(tmp_path / "t.xmix")])
        assert rc == 2


class TestIndexQuery:
    def _build(self, synth_dir, tmp_path):
        idx = tmp_path / "i.xmix"
        assert main(["index", str(synth_dir / "images.xmfp"), "--method", "sq",
                     "-o", str(idx)]) == 0
        return idx

    def test_self_query(self, synth_dir, tmp_path, capsys):
        idx = self._build(synth_dir, tmp_path)
        capsys.readouterr()
        assert main(["query", str(idx), "--id", "img000003", "--k", "3"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        rank, item_id, score = lines[0].split("\t")
        assert (rank, item_id, float(score)) == ("1", "img000003", 1.0)

    def test_query_from_pack(self, synth_dir, tmp_path, capsys):
        idx = self._build(synth_dir, tmp_path)
        capsys.readouterr()
        main(["query", str(idx), "--id", "img000003", "--k", "3"])
        from_index = capsys.readouterr().out
        assert main(["query", str(idx), "--id", "img000003", "--from",
                     str(synth_dir / "images.xmfp"), "--method", "sq", "--k", "3"]) == 0
        assert capsys.readouterr().out == from_index

    def test_k_beyond_corpus(self, synth_dir, tmp_path, capsys):
        idx = self._build(synth_dir, tmp_path)
        capsys.readouterr()
        main(["query", str(idx), "--id", "img000000", "--k", "1000"])
        lines = capsys.readouterr().out.strip().splitlines()
        assert 1 <= len(lines) <= 12

    def test_vector_query(self, synth_dir, tmp_path, capsys):
        idx = self._build(synth_dir, tmp_path)
        vec = tmp_path / "q.json"
        vec.write_text(json.dumps({"dim": 16, "entries": [[0, 5.0]]}))
        capsys.readouterr()
        assert main(["query", str(idx), "--vector", str(vec)]) == 0

    def test_reindex_segment(self, synth_dir, tmp_path):
        idx = self._build(synth_dir, tmp_path)
        assert main(["index", str(idx), "-o", str(tmp_path / "j.xmix")]) == 0
        assert load_index(tmp_path / "j.xmix") == load_index(idx)

    def test_unknown_id(self, synth_dir, tmp_path):
        idx = self._build(synth_dir, tmp_path)
        assert main(["query", str(idx), "--id", "nope"]) == 3

    def test_usage_errors(self, synth_dir, tmp_path):
        idx = self._build(synth_dir, tmp_path)
        assert main(["query", str(idx)]) == 1
        assert main(["bogus"]) == 1
        assert main(["query", str(idx), "--k", "many"]) == 1


class TestEvaluate:
    def test_single_baseline_and_oracle(self, synth_dir, tmp_path):
        out = tmp_path / "run"
        rc = main(["evaluate", "--method", "dp", "--images", str(synth_dir / "images.xmfp"),
                   "--sentences", str(synth_dir / "sentences.xmfp"), "--out-dir", str(out),
                   "--sparsity-list", "--ks", "1", "5", "10"])
        assert rc == 0
        doc = json.loads((out / "report.json").read_text())
        approx = [r for r in doc if r["method"] == "deep_permutation"]
        assert len(approx) == 2 and all(r["r_m"] is None for r in approx)
        images = load_feature_pack(synth_dir / "images.xmfp")
        sentences = load_feature_pack(synth_dir / "sentences.xmfp")
        oracle = pipeline_recall10(images, sentences, lambda x: dense_dp(x, 16))
        for r in approx:
            assert r["recall"]["10"] == pytest.approx(oracle[(r["task"], None)], abs=1e-9)
        header = (out / "report.csv").read_text().splitlines()[0]
        assert header == "task,method,sparsity,r_m,k,recall"

    def test_rerank_limit(self, synth_dir, tmp_path):
        out = tmp_path / "run"
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"method": "sq", "images": str(synth_dir / "images.xmfp"),
                                   "sentences": str(synth_dir / "sentences.xmfp"),
                                   "out_dir": str(out), "sparsity": 0.9, "include_exact": True}))
        assert main(["evaluate", "--config", str(cfg), "--rm-list", "1", "60", "--ks", "10"]) == 0
        doc = json.loads((out / "report.json").read_text())
        for task in ("image_retrieval", "sentence_retrieval"):
            exact = next(r for r in doc if r["method"] == "exact" and r["task"] == task)
            last = next(r for r in doc if r["r_m"] == 60 and r["task"] == task)
            assert last["recall"] == exact["recall"]

    def test_missing_images(self, tmp_path):
        rc = main(["evaluate", "--method", "dp", "--out-dir", str(tmp_path)])
        assert rc == 2


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "xmodal.cli", "query", str(tmp_path / "none.xmix"),
                           "--id", "a"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stderr.strip()
