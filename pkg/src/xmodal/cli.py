"""Command-line front end for the xmodal retrieval pipeline.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 unknown id.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .codebook import (DEFAULT_P, DEFAULT_POOL_SIZE, Codebook, build_pool, build_word_codebook,
                       kmeans, load_codebook, read_word_list, save_codebook)
from .errors import ConfigError, IoError, UnknownIdError, XmodalError
from .evaluation import (DEFAULT_KS, DEFAULT_SCALE, EvalReport, PipelineConfig, PipelineMethod,
                         encode_side, evaluate, evaluate_exact, reports_to_csv, reports_to_json)
from .features import (FeaturePack, SyntheticConfig, generate_synthetic, load_feature_pack,
                       write_feature_pack)
from .index import INDEX_MAGIC, build_index, load_index, query_topk, save_index
from .transforms import SparseVector

log = logging.getLogger("xmodal")

METHOD_ALIASES = {"dp": "deep_permutation", "sq": "scalar_quantization"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- run configuration ---------------------------------------------------------------


@dataclass
class RunConfig:
    """Experiment manifest for ``evaluate``; JSON keys mirror the field names."""

    method: str
    images: str
    sentences: str
    out_dir: str = "reports"
    codebook: str | None = None
    scale: float = DEFAULT_SCALE
    apply_crelu: bool = True
    sparsity: float | None = None
    sparsity_list: list[float] = field(default_factory=list)
    rm_list: list[int] = field(default_factory=list)
    ks: list[int] = field(default_factory=lambda: list(DEFAULT_KS))
    p: int = DEFAULT_P
    pool_size: int = DEFAULT_POOL_SIZE
    aggregation: str = "sum"
    row_keep_z: int | None = None
    exclude_stop_words_clustering: bool = False
    exclude_stop_words_indexing: bool = False
    paper_literal_similarity: bool = False
    hit_rule: str = "any"
    include_exact: bool = True
    seed: int = 0
    max_iters: int = 100
    tol: float = 1e-4

    def __post_init__(self):
        self.method = METHOD_ALIASES.get(self.method, self.method)
        try:
            PipelineMethod(self.method)
        except ValueError:
            raise ConfigError(f"unknown method {self.method!r}") from None
        if self.row_keep_z is not None and self.method != PipelineMethod.BOC_SOFT.value:
            raise ConfigError("row_keep_z only applies to boc_soft")

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"unknown run config key {unknown[0]!r}")
        for key in ("method", "images", "sentences"):
            if raw.get(key) is None:
                raise ConfigError(f"run config is missing key {key!r}")
        return cls(**raw)

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(self.method, self.scale, self.apply_crelu, self.aggregation,
                              self.row_keep_z, self.exclude_stop_words_indexing,
                              self.paper_literal_similarity, self.hit_rule)


def _read_json(path: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return raw


# -- shared transform flags ----------------------------------------------------------


def _add_transform_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--method", required=required,
                   choices=["deep_permutation", "dp", "scalar_quantization", "sq", "boc_hard", "boc_soft"])
    p.add_argument("--scale", type=float, default=DEFAULT_SCALE, help="scalar quantization scale")
    p.add_argument("--sparsity", type=float, default=None,
                   help="fraction of components zeroed out, in [0, 1)")
    p.add_argument("--no-crelu", action="store_true", help="skip c-relu before DP/SQ")
    p.add_argument("--codebook", help="codebook file (BoC methods)")
    p.add_argument("--aggregation", choices=["max", "sum"], default="sum")
    p.add_argument("--row-keep-z", type=int, default=None)
    p.add_argument("--exclude-stop-words", action="store_true",
                   help="drop stop-word concepts before encoding")
    p.add_argument("--paper-literal-similarity", action="store_true",
                   help="use 1/(1-D) instead of 1/(1+D) for soft assignment")


def _pipeline_from_args(args) -> tuple[PipelineConfig, Codebook | None]:
    method = METHOD_ALIASES.get(args.method, args.method)
    cfg = PipelineConfig(method, args.scale, not args.no_crelu, args.aggregation,
                         args.row_keep_z if method == "boc_soft" else None,
                         args.exclude_stop_words, args.paper_literal_similarity)
    codebook = None
    if not cfg.method.is_global:
        if not args.codebook:
            raise ConfigError(f"method {method} needs --codebook")
        codebook = load_codebook(args.codebook)
    return cfg, codebook


def _encode(pack: FeaturePack, args) -> list[tuple[str, SparseVector]]:
    cfg, codebook = _pipeline_from_args(args)
    return encode_side(pack, cfg, args.sparsity, codebook)


def _write_segment(encoded, modality: str, out: str) -> int:
    dim = encoded[0][1].dim if encoded else 1
    kept = [(i, v) for i, v in encoded if v.nnz]
    save_index(build_index(kept, modality, dim=dim), out)
    return len(encoded) - len(kept)


# -- commands ------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SyntheticConfig.from_json(args.config)
    images, sentences = generate_synthetic(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_feature_pack(images, out / "images.xmfp")
    write_feature_pack(sentences, out / "sentences.xmfp")
    n_img = sum(it.n_concepts for it in images.items)
    n_sen = sum(it.n_concepts for it in sentences.items)
    print(f"images: {len(images.items)} items, {n_img} concepts -> {out / 'images.xmfp'}")
    print(f"sentences: {len(sentences.items)} items, {n_sen} concepts -> {out / 'sentences.xmfp'}")
    return 0


def cmd_codebook(args) -> int:
    packs = [load_feature_pack(p) for p in args.packs]
    if args.method == "kmeans":
        pool = build_pool(packs, args.pool_size, args.exclude_stop_words, args.seed)
        cb = kmeans(pool, args.p, args.seed, args.max_iters, args.tol)
        log.info("kmeans objective %s", cb.objective_history[-1] if cb.objective_history else None)
    else:
        stop_words = read_word_list(args.stopwords) if args.stopwords else set()
        dictionary = read_word_list(args.dictionary) if args.dictionary else None
        sentence_packs = [p for p in packs if p.modality.value == "sentence"]
        cb = build_word_codebook(sentence_packs, args.p, dictionary, stop_words)
    save_codebook(cb, args.out)
    print(f"codebook: p={cb.p} dim={cb.dim} method={cb.method.value} -> {args.out}")
    return 0


def cmd_transform(args) -> int:
    pack = load_feature_pack(args.pack)
    encoded = _encode(pack, args)
    empty = _write_segment(encoded, pack.modality.value, args.out)
    print(f"encoded {len(encoded)} items, {empty} empty -> {args.out}")
    return 0


def cmd_index(args) -> int:
    with open(args.input, "rb") as fh:
        magic = fh.read(4)
    if magic == INDEX_MAGIC:
        index = load_index(args.input)
        save_index(index, args.out)
        print(f"indexed {len(index)} items (dim {index.dim}) -> {args.out}")
        return 0
    if not args.method:
        raise ConfigError("indexing a feature pack needs --method")
    pack = load_feature_pack(args.input)
    encoded = _encode(pack, args)
    empty = _write_segment(encoded, pack.modality.value, args.out)
    print(f"indexed {len(encoded) - empty} items, {empty} empty vectors skipped -> {args.out}")
    return 0


def _load_sparse_json(path: str) -> SparseVector:
    raw = _read_json(path)
    try:
        return SparseVector.from_pairs(int(raw["dim"]), [(int(i), float(w)) for i, w in raw["entries"]])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: expected {{\"dim\": n, \"entries\": [[i, w], ...]}} ({exc})") from exc


def cmd_query(args) -> int:
    index = load_index(args.index)
    if args.vector:
        q = _load_sparse_json(args.vector)
    elif args.id is None:
        raise UsageError("query needs --id or --vector")
    elif args.source is None:
        q = index.vector(args.id)
    else:
        with open(args.source, "rb") as fh:
            magic = fh.read(4)
        if magic == INDEX_MAGIC:
            q = load_index(args.source).vector(args.id)
        else:
            pack = load_feature_pack(args.source)
            if args.id not in set(pack.ids):
                raise UnknownIdError(f"unknown item id {args.id!r} in {args.source}")
            if not args.method:
                raise ConfigError("encoding a query from a feature pack needs --method")
            sub = FeaturePack(pack.modality, pack.dim, [pack.item(args.id)], pack.contextualized)
            q = _encode(sub, args)[0][1]
    for rank, (item_id, score) in enumerate(query_topk(index, q, args.k), 1):
        print(f"{rank}\t{item_id}\t{score:.6f}")
    return 0


def _flush(reports: list[EvalReport], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(reports_to_json(reports))
    (out / "report.csv").write_text(reports_to_csv(reports))


def cmd_evaluate(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    overrides = {
        "method": args.method, "images": args.images, "sentences": args.sentences,
        "out_dir": args.out_dir, "codebook": args.codebook, "sparsity": args.sparsity,
        "sparsity_list": args.sparsity_list, "rm_list": args.rm_list, "ks": args.ks,
        "hit_rule": args.hit_rule, "seed": args.seed,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    run = RunConfig.from_dict(raw)
    images = load_feature_pack(run.images)
    sentences = load_feature_pack(run.sentences)
    cfg = run.pipeline()
    codebook = None
    if not cfg.method.is_global:
        if run.codebook:
            codebook = load_codebook(run.codebook)
        else:
            pool = build_pool([images, sentences], run.pool_size,
                              run.exclude_stop_words_clustering, run.seed)
            codebook = kmeans(pool, run.p, run.seed, run.max_iters, run.tol)

    out = Path(run.out_dir)
    reports: list[EvalReport] = []
    try:
        if run.include_exact:
            reports.extend(evaluate_exact(images, sentences, run.ks, cfg.hit_rule))
            _flush(reports, out)
        points = run.sparsity_list or [run.sparsity]
        for f in points:
            reports.extend(evaluate(images, sentences, cfg, f, run.ks, run.rm_list, codebook))
            _flush(reports, out)
    finally:
        _flush(reports, out)
    for rep in reports:
        recall = " ".join(f"R@{k}={v:.2f}" for k, v in sorted(rep.recall.items()))
        print(f"{rep.task.value}\t{rep.method}\tsparsity={rep.sparsity}\tr_m={rep.r_m}\t{recall}")
    return 0


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xmodal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic image/sentence feature packs")
    p.add_argument("config", help="synthetic config JSON")
    p.add_argument("-o", "--out-dir", default=".")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("codebook", help="build a concept codebook")
    p.add_argument("packs", nargs="+")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--p", type=int, default=DEFAULT_P)
    p.add_argument("--method", choices=["kmeans", "word_frequency"], default="kmeans")
    p.add_argument("--exclude-stop-words", action="store_true")
    p.add_argument("--pool-size", type=int, default=DEFAULT_POOL_SIZE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--dictionary", help="word list, one token per line")
    p.add_argument("--stopwords", help="stop-word list, one token per line")
    p.set_defaults(func=cmd_codebook)

    p = sub.add_parser("transform", help="encode a pack into a sparse-vector segment")
    p.add_argument("pack")
    p.add_argument("-o", "--out", required=True)
    _add_transform_flags(p)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("index", help="build an index segment from a pack or transformed segment")
    p.add_argument("input")
    p.add_argument("-o", "--out", required=True)
    _add_transform_flags(p, required=False)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="top-k cosine search against an index segment")
    p.add_argument("index")
    p.add_argument("--id", help="query with this item's vector")
    p.add_argument("--from", dest="source",
                   help="segment or feature pack holding --id (default: the index itself)")
    p.add_argument("--vector", help='JSON file {"dim": n, "entries": [[i, w], ...]}')
    p.add_argument("--k", type=int, default=10)
    _add_transform_flags(p, required=False)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="run a Recall@K experiment")
    p.add_argument("--config", help="run config JSON; flags override its keys")
    p.add_argument("--method", choices=["deep_permutation", "dp", "scalar_quantization", "sq",
                                        "boc_hard", "boc_soft"])
    p.add_argument("--images")
    p.add_argument("--sentences")
    p.add_argument("--codebook")
    p.add_argument("--out-dir")
    p.add_argument("--sparsity", type=float)
    p.add_argument("--sparsity-list", type=float, nargs="*")
    p.add_argument("--rm-list", type=int, nargs="*")
    p.add_argument("--ks", type=int, nargs="+")
    p.add_argument("--hit-rule", choices=["any", "first"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"xmodal: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"xmodal: error: {exc}", file=sys.stderr)
        return 1
    except UnknownIdError as exc:
        print(f"xmodal: {exc}", file=sys.stderr)
        return 3
    except (XmodalError, OSError) as exc:
        print(f"xmodal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
