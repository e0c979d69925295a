"""Hybrid static/dynamic KV cache compression on attention traces."""

from .attention import default_k, focus_count, softmax_attention, text_centric_attention, topk_indices
from .budget import BudgetConfig, BudgetPlan, allocate_dynamic, allocate_static, build_plan, split_by_type
from .classify import HeadClass, HeadKind, SparsityScores, classify_heads, sparsity_score
from .engine import EngineConfig, RunReport, Strategy, decode_replay, prefill, run_strategy
from .errors import BudgetError, HybridKVError, InfeasibleSpecError, TraceFormatError
from .retrieval import ChunkIndex, TieredStore, build_index, dynamic_attention, retrieve, score_chunks
from .static_prune import PruneResult, prune_static_head, window_scores
from .trace import (
    AttentionTrace,
    GenSpec,
    TokenKind,
    TraceHeader,
    generate_trace,
    read_trace,
    standard_trace,
    write_trace,
)

__version__ = "0.1.0"
