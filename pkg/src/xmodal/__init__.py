"""Sparse, inverted-index friendly encodings of cross-modal deep features."""

__version__ = "0.1.0"

from .boc import Aggregation, Assignment, BocConfig, encode_pack, hard_assign, soft_assign
from .codebook import Codebook, ConceptPool, build_pool, build_word_codebook, kmeans
from .evaluation import (EvalReport, GroundTruth, HitRule, PipelineConfig, PipelineMethod, Task,
                         evaluate, evaluate_exact, recall_at_k, rerank, run_retrieval,
                         sparsity_sweep)
from .features import (Concept, FeaturePack, Item, Modality, SyntheticConfig, generate_synthetic,
                       load_feature_pack, write_feature_pack)
from .index import DenseStore, InvertedIndex, build_index, exact_topk, query_topk
from .transforms import (SparseVector, TransformConfig, crelu, deep_permutation, permutation,
                         scalar_quantize, sparse_cosine, sparsify_top_z)
