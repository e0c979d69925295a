"""
Top-down KV budget arithmetic.

A planning unit (one layer in the engine) first splits its total token budget
between head types with the share coefficient ``r``, then spreads the static
share over static heads (uniform base + score-proportional part, blended by
``alpha``) and gives every dynamic head the same number of retrieval chunks,
rounded up to a power of two.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

from .classify import HeadClass, HeadKind, SparsityScores
from .errors import BudgetError


class BudgetWarning(UserWarning):
    pass


def _ceil(x: float) -> int:
    # guard against 30.000000000000004-style float noise
    return math.ceil(round(x, 9))


def next_power_of_two(n: int) -> int:
    return 1 if n <= 1 else 1 << (n - 1).bit_length()


@dataclass(frozen=True)
class BudgetConfig:
    total_budget: int
    share_coefficient: float = 0.75
    allocation_ratio: float = 0.5
    chunk_size: int = 8

    def __post_init__(self):
        if self.share_coefficient <= 0:
            raise BudgetError("share coefficient r must be > 0")
        if not 0.0 < self.allocation_ratio < 1.0:
            raise BudgetError("allocation ratio alpha must be in (0, 1)")
        if self.chunk_size < 1:
            raise BudgetError("chunk_size must be >= 1")
        if self.total_budget < 0:
            raise BudgetError("total budget must be >= 0")


@dataclass
class BudgetPlan:
    total_budget: int
    static_budget: int  # B_stat
    dynamic_budget: int  # B_dyna
    mean_budget: float  # B-bar
    per_head_static: dict[tuple[int, int], int]
    per_head_dynamic_chunks: int
    dynamic_heads: list[tuple[int, int]] = field(default_factory=list)
    chunk_size: int = 8
    share_coefficient: float = 0.75
    dynamic_floor_applied: bool = False

    @property
    def n_static(self) -> int:
        return len(self.per_head_static)

    @property
    def n_dynamic(self) -> int:
        return len(self.dynamic_heads)

    @property
    def static_actual(self) -> int:
        return sum(self.per_head_static.values())

    @property
    def static_slack(self) -> int:
        return self.static_actual - self.static_budget

    @property
    def dynamic_actual(self) -> int:
        return self.n_dynamic * self.per_head_dynamic_chunks * self.chunk_size

    @property
    def dynamic_slack(self) -> int:
        return self.dynamic_actual - self.dynamic_budget

    def head_budget(self, head: tuple[int, int]) -> int:
        """Token capacity of one head (static budget or padded chunk capacity)."""
        if head in self.per_head_static:
            return self.per_head_static[head]
        return self.per_head_dynamic_chunks * self.chunk_size

    def to_dict(self) -> dict:
        return {
            "total_budget": self.total_budget,
            "share_coefficient": self.share_coefficient,
            "mean_budget": self.mean_budget,
            "static": {
                "nominal": self.static_budget,
                "actual": self.static_actual,
                "slack": self.static_slack,
                "per_head": [
                    {"layer": l, "head": h, "tokens": b} for (l, h), b in sorted(self.per_head_static.items())
                ],
            },
            "dynamic": {
                "nominal": self.dynamic_budget,
                "actual": self.dynamic_actual,
                "slack": self.dynamic_slack,
                "chunks_per_head": self.per_head_dynamic_chunks,
                "chunk_size": self.chunk_size,
                "heads": [[l, h] for l, h in self.dynamic_heads],
                "floor_applied": self.dynamic_floor_applied,
            },
        }


def max_share_coefficient(total_budget: int, n_static: int, n_dynamic: int) -> float:
    """Largest r that keeps B_dyna within B_total: B_total / (B-bar * N_dyna)."""
    if n_dynamic == 0:
        return math.inf
    return (n_static + n_dynamic) / n_dynamic


def split_by_type(total_budget: int, n_static: int, n_dynamic: int, r: float) -> tuple[int, int, float]:
    """Returns ``(B_stat, B_dyna, B_bar)``."""
    n = n_static + n_dynamic
    if n < 1:
        raise BudgetError("need at least one head")
    if total_budget < n:
        raise BudgetError(f"total budget {total_budget} cannot give each of {n} heads a token")
    if r <= 0:
        raise BudgetError("share coefficient r must be > 0")
    mean = total_budget / n
    if n_dynamic == 0:
        return total_budget, 0, mean
    if r > max_share_coefficient(total_budget, n_static, n_dynamic) + 1e-12:
        raise BudgetError(
            f"share coefficient r={r} exceeds the total-budget bound {max_share_coefficient(total_budget, n_static, n_dynamic):g}"
        )
    dyn = min(_ceil(r * mean * n_dynamic), total_budget)
    return total_budget - dyn, dyn, mean


def allocate_static(static_budget: int, static_scores: dict, alpha: float) -> dict:
    """Per-head static budgets: ceil(alpha*B/N + (1-alpha)*B*S_norm), at least 1."""
    if not 0.0 < alpha < 1.0:
        raise BudgetError("alpha must be in (0, 1)")
    if not static_scores:
        if static_budget > 0:
            raise BudgetError("static budget left over but there are no static heads")
        return {}
    if any(s <= 0 for s in static_scores.values()):
        raise BudgetError("static scores must be positive")
    n = len(static_scores)
    total = sum(static_scores.values())
    base = alpha * static_budget / n
    return {
        head: max(1, _ceil(base + (1.0 - alpha) * static_budget * s / total))
        for head, s in static_scores.items()
    }


def allocate_dynamic(dynamic_budget: int, n_dynamic: int, chunk_size: int) -> int:
    """Chunks per dynamic head: ceil(tokens/chunk_size) rounded up to a power of two."""
    if n_dynamic < 1:
        raise BudgetError("need at least one dynamic head")
    if chunk_size < 1:
        raise BudgetError("chunk_size must be >= 1")
    if dynamic_budget <= 0:
        warnings.warn("dynamic budget is zero; keeping one chunk per dynamic head", BudgetWarning, stacklevel=2)
        return 1
    chunks = _ceil(dynamic_budget / n_dynamic / chunk_size)
    return next_power_of_two(max(chunks, 1))


def build_plan(
    config: BudgetConfig, classes: HeadClass, scores: SparsityScores, layer: int | None = None
) -> BudgetPlan:
    """Plan the heads of ``layer`` (or of every layer jointly when None).

    When the unit has no static head at all, the dynamic heads take the whole
    budget (``r`` is pinned at its upper bound), since nothing could absorb the
    remainder.
    """
    static_heads = classes.heads_of(HeadKind.STATIC, layer)
    dynamic_heads = classes.heads_of(HeadKind.DYNAMIC, layer)
    n_stat, n_dyna = len(static_heads), len(dynamic_heads)
    r = config.share_coefficient
    if n_stat == 0:
        r = max_share_coefficient(config.total_budget, n_stat, n_dyna)
    b_stat, b_dyna, mean = split_by_type(config.total_budget, n_stat, n_dyna, r)
    per_static = allocate_static(b_stat, {hd: scores[hd] for hd in static_heads}, config.allocation_ratio)
    floor = False
    chunks = 0
    if n_dyna:
        floor = b_dyna == 0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BudgetWarning)
            chunks = allocate_dynamic(b_dyna, n_dyna, config.chunk_size)
    return BudgetPlan(
        total_budget=config.total_budget,
        static_budget=b_stat,
        dynamic_budget=b_dyna,
        mean_budget=mean,
        per_head_static=per_static,
        per_head_dynamic_chunks=chunks,
        dynamic_heads=dynamic_heads,
        chunk_size=config.chunk_size,
        share_coefficient=r,
        dynamic_floor_applied=floor,
    )


def uniform_plan(total_budget: int, heads: list[tuple[int, int]], chunk_size: int = 8) -> BudgetPlan:
    """Equal static budgets for every head, ignoring scores and head types."""
    if not heads:
        raise BudgetError("need at least one head")
    each = max(1, _ceil(total_budget / len(heads)))
    return BudgetPlan(
        total_budget=total_budget,
        static_budget=total_budget,
        dynamic_budget=0,
        mean_budget=total_budget / len(heads),
        per_head_static={hd: each for hd in heads},
        per_head_dynamic_chunks=0,
        chunk_size=chunk_size,
        share_coefficient=0.0,
    )
