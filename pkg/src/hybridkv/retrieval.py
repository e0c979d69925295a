"""
Chunk-indexed two-tier KV store for dynamic heads.

At prefill the head's keys are cut into fixed-size chunks, each summarized by
its mean key; the full K/V go to the slow tier. Every decode step scores the
chunks against the query by raw inner product and makes the top ``capacity``
chunks resident in the fast tier, paying transfer only for chunks that were not
already resident.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import softmax_attention, topk_indices

BYTES_PER_FLOAT = 4


@dataclass(frozen=True)
class ChunkIndex:
    chunk_size: int
    metadata: np.ndarray  # [num_chunks, d]
    chunk_ranges: tuple[tuple[int, int], ...]

    @property
    def num_chunks(self) -> int:
        return len(self.chunk_ranges)

    def tokens(self, chunk_ids) -> np.ndarray:
        """Token positions covered by ``chunk_ids``, ascending."""
        ids = sorted(chunk_ids)
        if not ids:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(*self.chunk_ranges[c]) for c in ids])


def build_index(keys, chunk_size: int) -> ChunkIndex:
    keys = np.asarray(keys, dtype=np.float64)
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("empty key matrix")
    C = keys.shape[0]
    ranges = tuple((s, min(s + chunk_size, C)) for s in range(0, C, chunk_size))
    metadata = np.stack([keys[s:e].mean(axis=0) for s, e in ranges])
    return ChunkIndex(chunk_size=chunk_size, metadata=metadata, chunk_ranges=ranges)


def score_chunks(q, index: ChunkIndex) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (index.metadata.shape[1],):
        raise ValueError(f"query dim {q.shape} does not match metadata dim {index.metadata.shape[1]}")
    return index.metadata @ q


@dataclass
class TieredStore:
    """One dynamic head's slow-tier K/V plus its fast-tier residency."""

    keys: np.ndarray  # slow tier, [C, d]
    values: np.ndarray
    resident: frozenset = frozenset()
    transfer_bytes: int = 0
    step_transfers: list = field(default_factory=list)

    @property
    def head_dim(self) -> int:
        return self.keys.shape[1]

    @property
    def slow_tier_bytes(self) -> int:
        return self.keys.shape[0] * 2 * self.head_dim * BYTES_PER_FLOAT

    def chunk_bytes(self, index: ChunkIndex, chunk: int) -> int:
        s, e = index.chunk_ranges[chunk]
        return (e - s) * 2 * self.head_dim * BYTES_PER_FLOAT

    def resident_tokens(self, index: ChunkIndex) -> int:
        return sum(e - s for s, e in (index.chunk_ranges[c] for c in self.resident))


def retrieve(q, index: ChunkIndex, store: TieredStore, capacity: int) -> frozenset:
    """Make the top-``capacity`` chunks resident; charge transfer for new ones."""
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    scores = score_chunks(q, index)
    chosen = frozenset(int(c) for c in topk_indices(scores, min(capacity, index.num_chunks)))
    moved = sum(store.chunk_bytes(index, c) for c in chosen - store.resident)
    store.resident = chosen
    store.transfer_bytes += moved
    store.step_transfers.append(moved)
    return chosen


def dynamic_attention(
    q,
    index: ChunkIndex,
    store: TieredStore,
    capacity: int,
    appended_keys=None,
    appended_values=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Retrieve, then attend over resident chunk tokens plus decode-appended entries.

    Tokens are laid out in context order followed by the appended entries, the
    same order the full cache uses, so a saturated capacity reproduces
    full-cache attention exactly.
    """
    retrieve(q, index, store, capacity)
    pos = index.tokens(store.resident)
    keys, values = store.keys[pos], store.values[pos]
    if appended_keys is not None and len(appended_keys):
        keys = np.concatenate([keys, np.asarray(appended_keys, dtype=keys.dtype)])
        values = np.concatenate([values, np.asarray(appended_values, dtype=values.dtype)])
    return softmax_attention(q, keys, values, scale_dim=store.head_dim)


def max_step_transfer(capacity: int, chunk_size: int, head_dim: int) -> int:
    return capacity * chunk_size * 2 * head_dim * BYTES_PER_FLOAT


def index_bytes(index: ChunkIndex) -> int:
    return int(math.prod(index.metadata.shape)) * BYTES_PER_FLOAT
