"""Dense attention kernels, top-k selection and the cumulative focus count."""

from __future__ import annotations

import math

import numpy as np

from .trace import AttentionTrace


def default_k(context_len: int) -> int:
    """Top-k size used for focus counting and sparsity scoring: ceil(5% of C)."""
    return math.ceil(0.05 * context_len)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_attention(q, keys, values, scale_dim: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Single-query scaled dot-product attention.

    Returns ``(output, row)`` where ``row = softmax(q @ keys.T / sqrt(scale_dim))``
    and ``output = row @ values``. Computed in float64.
    """
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("empty key set")
    if values.shape[0] != keys.shape[0]:
        raise ValueError("keys and values disagree on length")
    q = np.asarray(q, dtype=np.float64)
    if scale_dim is None:
        scale_dim = keys.shape[1]
    row = softmax(keys @ q / math.sqrt(scale_dim))
    return row @ values, row


def topk_indices(values, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, by descending value then ascending index."""
    values = np.asarray(values)
    n = values.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for length {n}")
    # stable sort keeps lower indices first among equal values
    return np.argsort(-values, kind="stable")[:k]


def text_centric_attention(trace: AttentionTrace, layer: int, head: int) -> np.ndarray:
    """[T, C] attention of the trailing text queries over the whole context."""
    if not (0 <= layer < trace.L and 0 <= head < trace.H):
        raise IndexError(f"head {(layer, head)} out of range")
    q = trace.prefill_q[layer, head, trace.C - trace.T:].astype(np.float64)
    k = trace.prefill_k[layer, head].astype(np.float64)
    return softmax(q @ k.T / math.sqrt(trace.d), axis=-1)


def decode_rows(trace: AttentionTrace, layer: int, head: int) -> list[np.ndarray]:
    """Full-cache attention row of every decode step.

    Step ``i`` attends over the C prefill keys followed by decode keys
    ``0..i`` (the step's own KV pair is appended before it attends).
    """
    pk = trace.prefill_k[layer, head].astype(np.float64)
    dk = trace.decode_k[:, layer, head].astype(np.float64)
    keys = np.concatenate([pk, dk])
    scale = math.sqrt(trace.d)
    rows = []
    for i in range(trace.N):
        q = trace.decode_q[i, layer, head].astype(np.float64)
        rows.append(softmax(keys[: trace.C + i + 1] @ q / scale))
    return rows


def focus_count_from_rows(rows, context_len: int, k: int) -> np.ndarray:
    """Count, per context token, how many rows place it among their top-k."""
    if not 1 <= k <= context_len:
        raise ValueError(f"k={k} must lie in [1, {context_len}]")
    counts = np.zeros(context_len, dtype=np.int64)
    for row in rows:
        counts[topk_indices(np.asarray(row)[:context_len], k)] += 1
    return counts


def focus_count(trace: AttentionTrace, layer: int, head: int, k: int | None = None) -> np.ndarray:
    """Cumulative focus count of every context token over all decode steps."""
    if trace.N < 1:
        raise ValueError("focus count needs at least one decode step")
    if k is None:
        k = default_k(trace.C)
    if not 1 <= k <= trace.C:
        raise ValueError(f"k={k} must lie in [1, {trace.C}]")
    return focus_count_from_rows(decode_rows(trace, layer, head), trace.C, k)
