"""Text-centric sparsity scores and static/dynamic head labels."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .attention import default_k, text_centric_attention
from .trace import AttentionTrace


class HeadKind(str, Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class SparsityScores:
    scores: np.ndarray  # [L, H]
    k_used: int

    def __getitem__(self, head: tuple[int, int]) -> float:
        return float(self.scores[head])


@dataclass(frozen=True)
class HeadClass:
    labels: tuple[tuple[HeadKind, ...], ...]  # [L][H]
    threshold: float
    cutoff: float  # score cutoff actually applied (== threshold in absolute mode)

    def __getitem__(self, head: tuple[int, int]) -> HeadKind:
        l, h = head
        return self.labels[l][h]

    @property
    def num_layers(self) -> int:
        return len(self.labels)

    @property
    def num_heads(self) -> int:
        return len(self.labels[0])

    def heads_of(self, kind: HeadKind, layer: int | None = None) -> list[tuple[int, int]]:
        layers = range(self.num_layers) if layer is None else [layer]
        return [(l, h) for l in layers for h in range(self.num_heads) if self.labels[l][h] is kind]

    def counts(self, layer: int | None = None) -> tuple[int, int]:
        """(N_stat, N_dyna)."""
        return len(self.heads_of(HeadKind.STATIC, layer)), len(self.heads_of(HeadKind.DYNAMIC, layer))

    @classmethod
    def uniform(cls, num_layers: int, num_heads: int, kind: HeadKind, threshold: float = float("nan")):
        labels = tuple(tuple(kind for _ in range(num_heads)) for _ in range(num_layers))
        return cls(labels=labels, threshold=threshold, cutoff=threshold)

    @classmethod
    def from_sets(cls, num_layers: int, num_heads: int, static: set, threshold: float = float("nan")):
        labels = tuple(
            tuple(HeadKind.STATIC if (l, h) in static else HeadKind.DYNAMIC for h in range(num_heads))
            for l in range(num_layers)
        )
        return cls(labels=labels, threshold=threshold, cutoff=threshold)


def sparsity_from_rows(rows: np.ndarray, k: int) -> float:
    """Mean over rows of the sum of each row's k largest entries."""
    rows = np.asarray(rows, dtype=np.float64)
    if not 1 <= k <= rows.shape[-1]:
        raise ValueError(f"k={k} out of range")
    top = -np.sort(-rows, axis=-1)[:, :k]
    return float(top.sum(axis=-1).mean())


def sparsity_score(trace: AttentionTrace, layer: int, head: int, k: int | None = None) -> float:
    if k is None:
        k = default_k(trace.C)
    if not 1 <= k <= trace.C:
        raise ValueError(f"k={k} must lie in [1, {trace.C}]")
    return sparsity_from_rows(text_centric_attention(trace, layer, head), k)


def compute_scores(trace: AttentionTrace, k: int | None = None) -> SparsityScores:
    if k is None:
        k = default_k(trace.C)
    scores = np.array([[sparsity_score(trace, l, h, k) for h in range(trace.H)] for l in range(trace.L)])
    return SparsityScores(scores=scores, k_used=k)


def label_scores(scores: SparsityScores, theta: float, mode: str = "absolute") -> HeadClass:
    """Threshold scores into labels.

    ``absolute`` compares every score against ``theta`` directly. ``quantile``
    uses the ``theta``-quantile of all L*H scores as the cutoff instead.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must be in (0, 1)")
    if mode == "absolute":
        cutoff = theta
    elif mode == "quantile":
        cutoff = float(np.quantile(scores.scores, theta))
    else:
        raise ValueError(f"unknown threshold mode {mode!r}")
    labels = tuple(
        tuple(HeadKind.STATIC if s >= cutoff else HeadKind.DYNAMIC for s in row) for row in scores.scores
    )
    return HeadClass(labels=labels, threshold=theta, cutoff=cutoff)


def classify_heads(
    trace: AttentionTrace, theta: float = 0.9, k: int | None = None, mode: str = "absolute"
) -> tuple[SparsityScores, HeadClass]:
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must be in (0, 1)")
    scores = compute_scores(trace, k)
    return scores, label_scores(scores, theta, mode)


def classification_records(scores: SparsityScores, classes: HeadClass) -> list[dict]:
    return [
        {"layer": l, "head": h, "score": float(scores.scores[l, h]), "label": classes[l, h].value}
        for l in range(classes.num_layers)
        for h in range(classes.num_heads)
    ]


def dump_classification(scores: SparsityScores, classes: HeadClass) -> str:
    return json.dumps(
        {
            "threshold": classes.threshold,
            "cutoff": classes.cutoff,
            "k": scores.k_used,
            "heads": classification_records(scores, classes),
        },
        indent=2,
    )
