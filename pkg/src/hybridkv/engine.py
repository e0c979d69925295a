"""
Prefill / decode-replay engine and run reports.

``prefill`` classifies heads, plans budgets layer by layer, prunes static heads
and indexes + offloads dynamic heads into a :class:`UnifiedBuffer`.
``decode_replay`` then walks the decode steps, runs every head against its
compressed state and against the full cache, and reports fidelity, fast-tier
memory and slow-to-fast transfer volume.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .attention import default_k, softmax_attention
from .budget import BudgetConfig, BudgetPlan, build_plan, uniform_plan
from .classify import HeadClass, HeadKind, SparsityScores, classify_heads
from .errors import BudgetError
from .retrieval import BYTES_PER_FLOAT, ChunkIndex, TieredStore, build_index, dynamic_attention, index_bytes
from .static_prune import default_window, prune_static_head
from .trace import AttentionTrace


class Strategy(str, Enum):
    HYBRID = "hybrid"
    ALL_STATIC = "all-static"
    ALL_DYNAMIC = "all-dynamic"
    UNIFORM_STATIC = "uniform-static"
    FULL_CACHE = "full"


ALL_STRATEGIES = (
    Strategy.HYBRID,
    Strategy.ALL_STATIC,
    Strategy.ALL_DYNAMIC,
    Strategy.UNIFORM_STATIC,
    Strategy.FULL_CACHE,
)


@dataclass(frozen=True)
class EngineConfig:
    budget_ratio: float = 0.10
    theta: float = 0.90
    r: float = 0.75
    alpha: float = 0.5
    chunk_size: int = 8
    window: int | None = None
    k: int | None = None
    threshold_mode: str = "absolute"

    def __post_init__(self):
        if not 0.0 < self.budget_ratio <= 1.0:
            raise BudgetError("budget ratio must be in (0,1]")
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must be in (0, 1)")
        if self.r <= 0:
            raise BudgetError("share coefficient r must be > 0")
        if not 0.0 < self.alpha < 1.0:
            raise BudgetError("allocation ratio alpha must be in (0, 1)")
        if self.chunk_size < 1:
            raise BudgetError("chunk_size must be >= 1")
        if self.threshold_mode not in ("absolute", "quantile"):
            raise ValueError(f"unknown threshold mode {self.threshold_mode!r}")

    def tokens_per_head(self, context_len: int) -> int:
        return math.ceil(round(self.budget_ratio * context_len, 9))

    def layer_budget(self, context_len: int, num_heads: int) -> int:
        return self.tokens_per_head(context_len) * num_heads

    def effective(self, trace: AttentionTrace) -> dict:
        """Every knob with defaults resolved against ``trace``."""
        out = asdict(self)
        out["window"] = min(self.window or default_window(trace.C), trace.C)
        out["k"] = self.k or default_k(trace.C)
        return out


@dataclass
class LayeredPlan:
    """One :class:`BudgetPlan` per layer."""

    layers: list[BudgetPlan]

    def head_budget(self, head: tuple[int, int]) -> int:
        return self.layers[head[0]].head_budget(head)

    def to_dict(self) -> dict:
        return {"layers": [p.to_dict() for p in self.layers]}


@dataclass
class HeadState:
    kind: str  # "static", "dynamic" or "full"
    keys: np.ndarray | None = None  # fast-tier K for static/full heads
    values: np.ndarray | None = None
    kept: np.ndarray | None = None
    index: ChunkIndex | None = None
    store: TieredStore | None = None
    capacity: int = 0

    def resident_prefill_tokens(self) -> int:
        if self.kind == "dynamic":
            return self.store.resident_tokens(self.index)
        return len(self.kept)


@dataclass
class UnifiedBuffer:
    heads: dict
    head_dim: int
    context_len: int
    appended: int = 0
    fast_tier_bytes: int = 0
    peak_fast_tier_bytes: int = 0
    slow_tier_bytes: int = 0
    index_bytes: int = 0

    def entry_bytes(self, entries: int) -> int:
        return entries * 2 * self.head_dim * BYTES_PER_FLOAT

    def recount(self) -> int:
        """Recompute fast-tier bytes from resident entries and update the peak."""
        entries = sum(st.resident_prefill_tokens() + self.appended for st in self.heads.values())
        self.fast_tier_bytes = self.entry_bytes(entries)
        self.peak_fast_tier_bytes = max(self.peak_fast_tier_bytes, self.fast_tier_bytes)
        return self.fast_tier_bytes

    def full_cache_bytes(self, appended: int | None = None) -> int:
        appended = self.appended if appended is None else appended
        return self.entry_bytes(len(self.heads) * (self.context_len + appended))

    @property
    def total_transfer_bytes(self) -> int:
        return sum(st.store.transfer_bytes for st in self.heads.values() if st.store is not None)


@dataclass
class RunReport:
    strategy: str
    config: dict
    heads: list
    fidelity: dict
    fast_tier_peak_bytes: int
    full_cache_bytes: int
    reduction_factor: float | None
    total_transfer_bytes: int
    steps: int
    slow_tier_bytes: int = 0
    index_bytes: int = 0
    plan: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_row(self) -> dict:
        agg = self.fidelity.get("aggregate", {})
        labels = [hd["label"] for hd in self.heads]
        return {
            "strategy": self.strategy,
            "budget_ratio": self.config["budget_ratio"],
            "theta": self.config["theta"],
            "r": self.config["r"],
            "alpha": self.config["alpha"],
            "chunk_size": self.config["chunk_size"],
            "window": self.config["window"],
            "k": self.config["k"],
            "n_static": labels.count("static"),
            "n_dynamic": labels.count("dynamic"),
            "mean_cosine": agg.get("mean_cosine"),
            "min_cosine": agg.get("min_cosine"),
            "mean_l2": agg.get("mean_l2"),
            "fast_tier_peak_bytes": self.fast_tier_peak_bytes,
            "full_cache_bytes": self.full_cache_bytes,
            "reduction_factor": self.reduction_factor,
            "total_transfer_bytes": self.total_transfer_bytes,
            "steps": self.steps,
            "status": "ok",
        }


CSV_COLUMNS = (
    "strategy",
    "budget_ratio",
    "theta",
    "r",
    "alpha",
    "chunk_size",
    "window",
    "k",
    "n_static",
    "n_dynamic",
    "mean_cosine",
    "min_cosine",
    "mean_l2",
    "fast_tier_peak_bytes",
    "full_cache_bytes",
    "reduction_factor",
    "total_transfer_bytes",
    "steps",
    "status",
)


def write_csv(rows: list[dict], extra_columns: tuple = ()) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(extra_columns) + list(CSV_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return buf.getvalue()


# --------------------------------------------------------------------------


def _labels_for(strategy: Strategy, trace: AttentionTrace, classes: HeadClass) -> HeadClass:
    if strategy in (Strategy.ALL_STATIC, Strategy.UNIFORM_STATIC):
        return HeadClass.uniform(trace.L, trace.H, HeadKind.STATIC, classes.threshold)
    if strategy is Strategy.ALL_DYNAMIC:
        return HeadClass.uniform(trace.L, trace.H, HeadKind.DYNAMIC, classes.threshold)
    return classes


def plan_layers(
    trace: AttentionTrace, config: EngineConfig, classes: HeadClass, scores: SparsityScores, uniform: bool = False
) -> LayeredPlan:
    budget = config.layer_budget(trace.C, trace.H)
    if uniform:
        return LayeredPlan(
            [uniform_plan(budget, [(l, h) for h in range(trace.H)], config.chunk_size) for l in range(trace.L)]
        )
    bc = BudgetConfig(
        total_budget=budget,
        share_coefficient=config.r,
        allocation_ratio=config.alpha,
        chunk_size=config.chunk_size,
    )
    return LayeredPlan([build_plan(bc, classes, scores, layer=l) for l in range(trace.L)])


def prefill(
    trace: AttentionTrace, config: EngineConfig, strategy: Strategy | str = Strategy.HYBRID
) -> tuple[UnifiedBuffer, LayeredPlan | None, HeadClass | None, SparsityScores | None]:
    strategy = Strategy(strategy)
    d, C = trace.d, trace.C
    buffer = UnifiedBuffer(heads={}, head_dim=d, context_len=C)

    if strategy is Strategy.FULL_CACHE:
        everything = np.arange(C)
        for l, h in trace.heads():
            buffer.heads[l, h] = HeadState(
                kind="full",
                keys=trace.prefill_k[l, h].astype(np.float64),
                values=trace.prefill_v[l, h].astype(np.float64),
                kept=everything,
            )
        buffer.recount()
        return buffer, None, None, None

    scores, classes = classify_heads(trace, config.theta, config.k, config.threshold_mode)
    labels = _labels_for(strategy, trace, classes)
    plan = plan_layers(trace, config, labels, scores, uniform=strategy is Strategy.UNIFORM_STATIC)
    w = config.effective(trace)["window"]

    for l, h in trace.heads():
        pk = trace.prefill_k[l, h].astype(np.float64)
        pv = trace.prefill_v[l, h].astype(np.float64)
        if labels[l, h] is HeadKind.STATIC:
            res = prune_static_head(trace, l, h, plan.head_budget((l, h)), w)
            buffer.heads[l, h] = HeadState(
                kind="static", keys=pk[res.kept_indices], values=pv[res.kept_indices], kept=res.kept_indices
            )
        else:
            index = build_index(pk, config.chunk_size)
            store = TieredStore(keys=pk, values=pv)
            buffer.heads[l, h] = HeadState(
                kind="dynamic",
                index=index,
                store=store,
                capacity=plan.layers[l].per_head_dynamic_chunks,
            )
            buffer.slow_tier_bytes += store.slow_tier_bytes
            buffer.index_bytes += index_bytes(index)
    buffer.recount()
    return buffer, plan, labels, scores


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def decode_replay(
    trace: AttentionTrace,
    buffer: UnifiedBuffer,
    plan: LayeredPlan | None = None,
    strategy: Strategy | str = Strategy.HYBRID,
    config: EngineConfig | None = None,
    labels: HeadClass | None = None,
    scores: SparsityScores | None = None,
) -> RunReport:
    strategy = Strategy(strategy)
    config = config or EngineConfig()
    N, d, C = trace.N, trace.d, trace.C
    heads = trace.heads()

    full_keys = {}
    full_values = {}
    for l, h in heads:
        full_keys[l, h] = np.concatenate([trace.prefill_k[l, h], trace.decode_k[:, l, h]]).astype(np.float64)
        full_values[l, h] = np.concatenate([trace.prefill_v[l, h], trace.decode_v[:, l, h]]).astype(np.float64)

    cos = np.zeros((N, trace.L, trace.H))
    l2 = np.zeros((N, trace.L, trace.H))
    max_abs = np.zeros((N, trace.L, trace.H))
    for i in range(N):
        buffer.appended = i + 1
        n_ctx = C + i + 1
        for l, h in heads:
            q = trace.decode_q[i, l, h].astype(np.float64)
            ref, _ = softmax_attention(q, full_keys[l, h][:n_ctx], full_values[l, h][:n_ctx], d)
            st = buffer.heads[l, h]
            app_k = full_keys[l, h][C:n_ctx]
            app_v = full_values[l, h][C:n_ctx]
            if st.kind == "dynamic":
                out, _ = dynamic_attention(q, st.index, st.store, st.capacity, app_k, app_v)
            else:
                out, _ = softmax_attention(
                    q, np.concatenate([st.keys, app_k]), np.concatenate([st.values, app_v]), d
                )
            cos[i, l, h] = _cosine(out, ref)
            l2[i, l, h] = float(np.linalg.norm(out - ref))
            max_abs[i, l, h] = float(np.abs(out - ref).max())
        buffer.recount()

    if N:
        fidelity = {
            "aggregate": {
                "mean_cosine": float(cos.mean()),
                "min_cosine": float(cos.min()),
                "mean_l2": float(l2.mean()),
                "max_abs_error": float(max_abs.max()),
            },
            "per_layer": [
                {
                    "layer": l,
                    "mean_cosine": float(cos[:, l].mean()),
                    "min_cosine": float(cos[:, l].min()),
                    "mean_l2": float(l2[:, l].mean()),
                }
                for l in range(trace.L)
            ],
            "per_head_mean_cosine": [[float(x) for x in row] for row in cos.mean(axis=0)],
        }
    else:
        fidelity = {}

    head_rows = []
    for l, h in heads:
        st = buffer.heads[l, h]
        row = {"layer": l, "head": h, "label": st.kind}
        if scores is not None:
            row["score"] = float(scores.scores[l, h])
        if st.kind == "dynamic":
            row["budget_tokens"] = st.capacity * st.index.chunk_size
            row["chunks"] = st.capacity
            row["transfer_bytes"] = st.store.transfer_bytes
        else:
            row["budget_tokens"] = len(st.kept)
        head_rows.append(row)

    full_bytes = buffer.full_cache_bytes(N)
    peak = buffer.peak_fast_tier_bytes
    return RunReport(
        strategy=strategy.value,
        config=config.effective(trace),
        heads=head_rows,
        fidelity=fidelity,
        fast_tier_peak_bytes=peak,
        full_cache_bytes=full_bytes,
        reduction_factor=full_bytes / peak if peak else None,
        total_transfer_bytes=buffer.total_transfer_bytes,
        steps=N,
        slow_tier_bytes=buffer.slow_tier_bytes,
        index_bytes=buffer.index_bytes,
        plan=plan.to_dict() if plan is not None else {},
    )


def run_strategy(
    trace: AttentionTrace, config: EngineConfig | None = None, strategy: Strategy | str = Strategy.HYBRID
) -> RunReport:
    config = config or EngineConfig()
    strategy = Strategy(strategy)
    buffer, plan, labels, scores = prefill(trace, config, strategy)
    return decode_replay(trace, buffer, plan, strategy, config, labels, scores)
