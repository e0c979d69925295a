"""Observation-window scoring and text-prior pruning for static heads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import softmax, topk_indices
from .trace import AttentionTrace, TokenKind


@dataclass(frozen=True)
class PruneResult:
    kept_indices: np.ndarray
    score_vector: np.ndarray
    window_len: int


def default_window(context_len: int) -> int:
    if context_len < 64:
        return min(context_len, max(4, context_len // 8))
    return 32


def window_scores_from_qk(queries, keys, w: int) -> np.ndarray:
    """Mean causal attention row of the last ``w`` queries over all C keys."""
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    C, d = keys.shape
    if not 1 <= w <= C:
        raise ValueError(f"window {w} out of range for context {C}")
    logits = queries[C - w:] @ keys.T / math.sqrt(d)
    pos = np.arange(C - w, C)[:, None]
    logits = np.where(np.arange(C)[None, :] <= pos, logits, -np.inf)
    return softmax(logits, axis=-1).mean(axis=0)


def window_scores(trace: AttentionTrace, layer: int, head: int, w: int) -> np.ndarray:
    return window_scores_from_qk(trace.prefill_q[layer, head], trace.prefill_k[layer, head], w)


def select_kept(s_w: np.ndarray, token_types: np.ndarray, budget: int, w: int) -> np.ndarray:
    """Text-prior retention order: window, then historical text, then top visual."""
    C = len(s_w)
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if budget >= C:
        return np.arange(C)
    window = np.arange(C - w, C)
    n_win = min(budget, w)
    kept = [window[w - n_win:]]  # newest first when the budget is short
    remaining = budget - n_win

    hist_types = np.asarray(token_types[: C - w])
    text_pos = np.flatnonzero(hist_types == TokenKind.TEXT)
    visual_pos = np.flatnonzero(hist_types != TokenKind.TEXT)
    if remaining and len(text_pos):
        n_text = min(remaining, len(text_pos))
        kept.append(text_pos[topk_indices(s_w[text_pos], n_text)])
        remaining -= n_text
    if remaining and len(visual_pos):
        m = min(remaining, len(visual_pos))
        kept.append(visual_pos[topk_indices(s_w[visual_pos], m)])
    return np.sort(np.concatenate(kept))


def prune_static_head(trace: AttentionTrace, layer: int, head: int, budget: int, w: int | None = None) -> PruneResult:
    if w is None:
        w = default_window(trace.C)
    w = min(w, trace.C)
    s_w = window_scores(trace, layer, head, w)
    kept = select_kept(s_w, trace.token_types, budget, w)
    return PruneResult(kept_indices=kept, score_vector=s_w, window_len=w)
