"""
Attention-trace data model, binary file format and synthetic trace generator.

A trace carries everything the engine needs for one prompt: per-layer, per-head
prefill Q/K/V for the ``C`` context tokens, the text/visual kind of each token,
and per-step decode queries plus the KV pair appended at each decode step.

File layout (all little-endian)::

    magic         4 bytes  b"HKVT"
    version       uint32
    num_layers    uint32   L
    num_heads     uint32   H
    head_dim      uint32   d
    context_len   uint32   C
    text_window   uint32   T
    decode_steps  uint32   N
    float_width   uint32   always 4
    token kinds   C bytes  0 = VISUAL, 1 = TEXT
    prefill_q, prefill_k, prefill_v   float32 [L, H, C, d] each
    decode_q, decode_k, decode_v      float32 [N, L, H, d] each
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .errors import InfeasibleSpecError, TraceFormatError

MAGIC = b"HKVT"
VERSION = 1
FLOAT_WIDTH = 4
_HEADER_STRUCT = struct.Struct("<4s8I")
HEADER_BYTES = _HEADER_STRUCT.size

_F32 = np.dtype("<f4")
_TENSOR_NAMES = ("prefill_q", "prefill_k", "prefill_v", "decode_q", "decode_k", "decode_v")


class TokenKind(IntEnum):
    VISUAL = 0
    TEXT = 1


@dataclass(frozen=True)
class TraceHeader:
    num_layers: int
    num_heads: int
    head_dim: int
    context_len: int
    text_window: int
    decode_steps: int
    version: int = VERSION
    float_width: int = FLOAT_WIDTH

    def validate(self) -> None:
        if self.version != VERSION:
            raise TraceFormatError(f"version mismatch: expected {VERSION}, got {self.version}")
        if self.float_width != FLOAT_WIDTH:
            raise TraceFormatError(f"unsupported float width {self.float_width}")
        if self.num_layers < 1 or self.num_heads < 1 or self.head_dim < 1:
            raise TraceFormatError("num_layers, num_heads and head_dim must be >= 1")
        if not (1 <= self.text_window <= self.context_len):
            raise TraceFormatError("need 1 <= text_window <= context_len")
        if self.decode_steps < 0:
            raise TraceFormatError("decode_steps must be >= 0")

    @property
    def prefill_shape(self) -> tuple[int, int, int, int]:
        return (self.num_layers, self.num_heads, self.context_len, self.head_dim)

    @property
    def decode_shape(self) -> tuple[int, int, int, int]:
        return (self.decode_steps, self.num_layers, self.num_heads, self.head_dim)

    @property
    def payload_bytes(self) -> int:
        n_float = 3 * math.prod(self.prefill_shape) + 3 * math.prod(self.decode_shape)
        return self.context_len + n_float * FLOAT_WIDTH

    def pack(self) -> bytes:
        return _HEADER_STRUCT.pack(
            MAGIC,
            self.version,
            self.num_layers,
            self.num_heads,
            self.head_dim,
            self.context_len,
            self.text_window,
            self.decode_steps,
            self.float_width,
        )


@dataclass(frozen=True, eq=False)
class AttentionTrace:
    header: TraceHeader
    token_types: np.ndarray  # uint8 [C]
    prefill_q: np.ndarray
    prefill_k: np.ndarray
    prefill_v: np.ndarray
    decode_q: np.ndarray
    decode_k: np.ndarray
    decode_v: np.ndarray

    def __post_init__(self):
        for name in _TENSOR_NAMES:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        kinds = np.ascontiguousarray(self.token_types, dtype=np.uint8)
        kinds.setflags(write=False)
        object.__setattr__(self, "token_types", kinds)

    # Shorthands used all over the engine.
    @property
    def L(self) -> int:
        return self.header.num_layers

    @property
    def H(self) -> int:
        return self.header.num_heads

    @property
    def d(self) -> int:
        return self.header.head_dim

    @property
    def C(self) -> int:
        return self.header.context_len

    @property
    def T(self) -> int:
        return self.header.text_window

    @property
    def N(self) -> int:
        return self.header.decode_steps

    def heads(self) -> list[tuple[int, int]]:
        return [(l, h) for l in range(self.L) for h in range(self.H)]

    def is_text(self) -> np.ndarray:
        return self.token_types == TokenKind.TEXT

    def validate(self, check_finite: bool = True) -> None:
        """Raise TraceFormatError unless every invariant holds."""
        hdr = self.header
        hdr.validate()
        if self.token_types.shape != (hdr.context_len,):
            raise TraceFormatError("shape inconsistency: token_types")
        if not np.isin(self.token_types, (TokenKind.VISUAL, TokenKind.TEXT)).all():
            raise TraceFormatError("unknown token kind")
        if not (self.token_types[hdr.context_len - hdr.text_window:] == TokenKind.TEXT).all():
            raise TraceFormatError("the final text_window tokens must be TEXT")
        for name in _TENSOR_NAMES:
            want = hdr.prefill_shape if name.startswith("prefill") else hdr.decode_shape
            arr = getattr(self, name)
            if arr.shape != want:
                raise TraceFormatError(f"shape inconsistency: {name} has {arr.shape}, header says {want}")
            if check_finite and not np.isfinite(arr).all():
                raise TraceFormatError(f"non-finite value in {name}")

    def decode_keys_upto(self, layer: int, head: int, step: int) -> tuple[np.ndarray, np.ndarray]:
        """Decode-appended K and V for one head, steps ``0..step`` inclusive."""
        return (
            self.decode_k[: step + 1, layer, head],
            self.decode_v[: step + 1, layer, head],
        )

    def equals(self, other: "AttentionTrace") -> bool:
        """Bit-exact equality."""
        if self.header != other.header:
            return False
        if self.token_types.tobytes() != other.token_types.tobytes():
            return False
        return all(
            getattr(self, n).tobytes() == getattr(other, n).tobytes() for n in _TENSOR_NAMES
        )


def write_trace(trace: AttentionTrace, destination: BinaryIO | str | Path) -> int:
    """Serialize ``trace``; returns the number of bytes written."""
    trace.validate()
    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as fh:
            return write_trace(trace, fh)
    written = 0
    chunks: list[bytes] = [trace.header.pack(), trace.token_types.tobytes()]
    chunks.extend(getattr(trace, n).astype(_F32, copy=False).tobytes(order="C") for n in _TENSOR_NAMES)
    for chunk in chunks:
        n = destination.write(chunk)
        written += len(chunk) if n is None else n
    return written


def _read_exact(source: BinaryIO, n: int) -> bytes:
    buf = source.read(n)
    if len(buf) != n:
        raise TraceFormatError("truncated payload")
    return buf


def read_trace(source: BinaryIO | str | Path | bytes) -> AttentionTrace:
    """Parse a trace written by :func:`write_trace` and validate it."""
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return read_trace(fh)

    raw = source.read(HEADER_BYTES)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise TraceFormatError("bad magic")
    if len(raw) != HEADER_BYTES:
        raise TraceFormatError("truncated payload")
    _, version, L, H, d, C, T, N, fw = _HEADER_STRUCT.unpack(raw)
    if version != VERSION:
        raise TraceFormatError(f"version mismatch: expected {VERSION}, got {version}")
    header = TraceHeader(L, H, d, C, T, N, version=version, float_width=fw)
    header.validate()

    kinds = np.frombuffer(_read_exact(source, C), dtype=np.uint8)
    tensors = {}
    for name in _TENSOR_NAMES:
        shape = header.prefill_shape if name.startswith("prefill") else header.decode_shape
        count = math.prod(shape)
        buf = _read_exact(source, count * FLOAT_WIDTH)
        tensors[name] = np.frombuffer(buf, dtype=_F32).reshape(shape).astype(np.float32)
    if source.read(1):
        raise TraceFormatError("shape inconsistency: trailing bytes after payload")
    trace = AttentionTrace(header=header, token_types=kinds, **tensors)
    trace.validate()
    return trace


# --------------------------------------------------------------------------
# Synthetic traces
# --------------------------------------------------------------------------


@dataclass
class GenSpec:
    """What to plant in a synthetic trace.

    Static heads get a fixed anchor set that soaks up at least ``concentration``
    of the attention of every text query and every decode query. Dynamic heads
    see diffuse text attention while their decode queries hop between disjoint
    key blocks.
    """

    seed: int
    planted_static: frozenset = field(default_factory=frozenset)
    planted_dynamic: frozenset = field(default_factory=frozenset)
    concentration: float = 0.95
    focus_set_size: int = 16

    def __post_init__(self):
        self.planted_static = frozenset(tuple(x) for x in self.planted_static)
        self.planted_dynamic = frozenset(tuple(x) for x in self.planted_dynamic)

    def validate(self, header: TraceHeader) -> None:
        all_heads = {(l, h) for l in range(header.num_layers) for h in range(header.num_heads)}
        if self.planted_static & self.planted_dynamic:
            raise InfeasibleSpecError("planted static and dynamic sets overlap")
        planted = self.planted_static | self.planted_dynamic
        if planted - all_heads:
            raise InfeasibleSpecError("planted sets exceed head count")
        if planted != all_heads:
            raise InfeasibleSpecError("planted sets must cover every (layer, head)")
        if not 0.0 < self.concentration <= 1.0:
            raise InfeasibleSpecError("concentration must be in (0, 1]")
        if not 1 <= self.focus_set_size <= header.context_len:
            raise InfeasibleSpecError("focus_set_size must be in [1, context_len]")
        if self.concentration >= 1.0 and self.planted_static and self.focus_set_size < header.context_len:
            # softmax never gives a strict subset all of the mass
            raise InfeasibleSpecError(
                f"concentration {self.concentration} infeasible for C={header.context_len}, "
                f"focus_set_size={self.focus_set_size}"
            )

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "planted_static": sorted(list(x) for x in self.planted_static),
                "planted_dynamic": sorted(list(x) for x in self.planted_dynamic),
                "concentration": self.concentration,
                "focus_set_size": self.focus_set_size,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "GenSpec":
        obj = json.loads(text)
        return cls(
            seed=int(obj["seed"]),
            planted_static=frozenset(tuple(x) for x in obj["planted_static"]),
            planted_dynamic=frozenset(tuple(x) for x in obj["planted_dynamic"]),
            concentration=float(obj.get("concentration", 0.95)),
            focus_set_size=int(obj.get("focus_set_size", 16)),
        )


def interleaved_plan(num_layers: int, num_heads: int, n_static: int) -> tuple[frozenset, frozenset]:
    """Spread ``n_static`` static heads evenly over the flattened head list.

    8 static of 2x8 gives heads 1, 3, 5, 7 of each layer, so every layer mixes
    both kinds.
    """
    total = num_layers * num_heads
    if not 0 <= n_static <= total:
        raise InfeasibleSpecError("planted sets exceed head count")
    static, dynamic = set(), set()
    for i in range(total):
        head = (i // num_heads, i % num_heads)
        if (i + 1) * n_static // total > i * n_static // total:
            static.add(head)
        else:
            dynamic.add(head)
    return frozenset(static), frozenset(dynamic)


QUERY_NOISE = 1.0
DYNAMIC_FOCUS_MASS = 0.6
DYNAMIC_MASS_LIMIT = 0.75
_MAX_TRIES = 40


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def _decode_rows(prefill_k, decode_q, decode_k) -> list[np.ndarray]:
    """Attention of each decode query over prefill keys plus decode keys so far."""
    d = prefill_k.shape[1]
    rows = []
    for i in range(decode_q.shape[0]):
        keys = np.concatenate([prefill_k, decode_k[: i + 1]]).astype(np.float64)
        rows.append(_softmax_rows(keys @ decode_q[i].astype(np.float64) / math.sqrt(d)))
    return rows


def dynamic_block_size(context_len: int) -> int:
    return min(context_len, 8 * max(1, context_len // 256))


class _HeadDraws:
    """Raw gaussian draws for one head; strength knobs are applied on top."""

    def __init__(self, seed: int, layer: int, head: int, C: int, N: int, d: int):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, layer, head)))
        self.structure = np.random.SeedSequence(seed, spawn_key=(2, layer, head))
        self.zk = rng.standard_normal((C, d))
        self.zq = rng.standard_normal((C, d))
        self.zdq = rng.standard_normal((N, d))
        self.zdk = rng.standard_normal((N, d))


def _static_head(draws: _HeadDraws, C: int, T: int, d: int, f: int, strength: float):
    rng = np.random.default_rng(draws.structure)
    u = _unit(rng, d)
    pool = C - T if C - T >= f else C
    anchors = np.sort(rng.choice(pool, size=f, replace=False))
    proj = np.eye(d) - np.outer(u, u)
    amp = math.sqrt(strength * math.sqrt(d))
    keys = draws.zk @ proj
    keys[anchors] += amp * u
    queries = QUERY_NOISE * (draws.zq @ proj) + amp * u
    dq = QUERY_NOISE * (draws.zdq @ proj) + amp * u
    dk = draws.zdk @ proj
    return keys, queries, dq, dk, anchors


def _dynamic_head(draws: _HeadDraws, C: int, N: int, d: int, strength: float):
    rng = np.random.default_rng(draws.structure)
    bsz = dynamic_block_size(C)
    nb = math.ceil(C / bsz)
    if nb <= d:
        topics = np.linalg.qr(rng.standard_normal((d, nb)))[0].T
    else:
        topics = rng.standard_normal((nb, d))
        topics /= np.linalg.norm(topics, axis=1, keepdims=True)
    order = rng.permutation(nb)
    amp = math.sqrt(strength * math.sqrt(d))
    block_of = np.arange(C) // bsz
    keys = draws.zk + amp * topics[block_of]
    queries = QUERY_NOISE * draws.zq
    focus = order[np.arange(N) % nb]
    dq = QUERY_NOISE * draws.zdq + amp * topics[focus]
    dk = draws.zdk.copy()
    return keys, queries, dq, dk, focus


def _initial_static_strength(C: int, N: int, f: int, conc: float) -> float:
    conc = min(conc, 1.0 - 1e-9)
    others = max(C + N - f, 1)
    return math.log(conc / (1.0 - conc) * others * math.exp(QUERY_NOISE**2 / 2) / f) + 1.0


def _initial_dynamic_strength(C: int, N: int) -> float:
    bsz = dynamic_block_size(C)
    others = max(C + N - bsz, 1)
    m = DYNAMIC_FOCUS_MASS
    return max(math.log(m / (1 - m) * others * math.exp(QUERY_NOISE**2 / 2) / bsz), 0.0)


def _topk_mass(rows: np.ndarray, k: int) -> np.ndarray:
    return -np.sort(-rows, axis=-1)[..., :k].sum(axis=-1)


def generate_trace(spec: GenSpec, header: TraceHeader) -> AttentionTrace:
    """Build a deterministic trace with the planted static/dynamic behaviour.

    Static heads are strengthened until every text row and every decode row
    puts at least ``spec.concentration`` of its mass on the anchors and the
    weakest static sparsity score beats the strongest dynamic one. Dynamic heads
    are softened until no fixed ``ceil(0.05*C)``-token set collects more than
    0.75 of the cumulative decode attention.
    """
    header.validate()
    spec.validate(header)
    L, H, d, C, T, N = (
        header.num_layers,
        header.num_heads,
        header.head_dim,
        header.context_len,
        header.text_window,
        header.decode_steps,
    )
    k = math.ceil(0.05 * C)
    kinds = np.full(C, TokenKind.VISUAL, dtype=np.uint8)
    kinds[C - T:] = TokenKind.TEXT

    vrng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0,)))
    prefill_v = vrng.standard_normal((L, H, C, d)).astype(np.float32)
    decode_v = vrng.standard_normal((N, L, H, d)).astype(np.float32)

    prefill_q = np.empty((L, H, C, d), dtype=np.float32)
    prefill_k = np.empty((L, H, C, d), dtype=np.float32)
    decode_q = np.empty((N, L, H, d), dtype=np.float32)
    decode_k = np.empty((N, L, H, d), dtype=np.float32)

    draws = {(l, h): _HeadDraws(spec.seed, l, h, C, N, d) for l in range(L) for h in range(H)}

    def text_scores(keys, queries) -> float:
        rows = _softmax_rows(queries[C - T:].astype(np.float64) @ keys.astype(np.float64).T / math.sqrt(d))
        return float(_topk_mass(rows, k).mean())

    def store(l, h, parts):
        keys, queries, dq, dk = (np.asarray(p, dtype=np.float32) for p in parts[:4])
        prefill_k[l, h], prefill_q[l, h] = keys, queries
        decode_q[:, l, h], decode_k[:, l, h] = dq, dk
        return keys, queries, dq, dk

    dyn_max = -math.inf
    for l, h in sorted(spec.planted_dynamic):
        strength = _initial_dynamic_strength(C, N)
        for _ in range(_MAX_TRIES):
            keys, queries, dq, dk = store(l, h, _dynamic_head(draws[l, h], C, N, d, strength))
            if N == 0:
                break
            rows = np.stack([r[:C] for r in _decode_rows(keys, dq, dk)])
            cumulative = -np.sort(-rows.sum(axis=0))[:k].sum() / N
            if cumulative <= DYNAMIC_MASS_LIMIT:
                break
            strength = max(strength - 0.5, 0.0)
        else:
            raise InfeasibleSpecError(f"cannot spread dynamic head {(l, h)} below the 5% mass limit")
        dyn_max = max(dyn_max, text_scores(keys, queries))

    for l, h in sorted(spec.planted_static):
        strength = _initial_static_strength(C, N, spec.focus_set_size, spec.concentration)
        for _ in range(_MAX_TRIES):
            keys, queries, dq, dk, anchors = _static_head(
                draws[l, h], C, T, d, spec.focus_set_size, strength
            )
            keys, queries, dq, dk = store(l, h, (keys, queries, dq, dk))
            text_rows = _softmax_rows(
                queries[C - T:].astype(np.float64) @ keys.astype(np.float64).T / math.sqrt(d)
            )
            ok = text_rows[:, anchors].sum(axis=1).min() >= spec.concentration
            if ok and N:
                ok = min(r[anchors].sum() for r in _decode_rows(keys, dq, dk)) >= spec.concentration
            if ok and text_scores(keys, queries) > dyn_max:
                break
            strength += 1.0
        else:
            raise InfeasibleSpecError(
                f"concentration {spec.concentration} infeasible for C={C}, focus_set_size={spec.focus_set_size}"
            )

    trace = AttentionTrace(
        header=header,
        token_types=kinds,
        prefill_q=prefill_q,
        prefill_k=prefill_k,
        prefill_v=prefill_v,
        decode_q=decode_q,
        decode_k=decode_k,
        decode_v=decode_v,
    )
    trace.validate()
    return trace


def anchor_set(spec: GenSpec, header: TraceHeader, layer: int, head: int) -> np.ndarray:
    """Anchor positions the generator planted for a static head."""
    if (layer, head) not in spec.planted_static:
        raise KeyError((layer, head))
    draws = _HeadDraws(spec.seed, layer, head, header.context_len, header.decode_steps, header.head_dim)
    return _static_head(
        draws, header.context_len, header.text_window, header.head_dim, spec.focus_set_size, 1.0
    )[4]


def standard_trace(seed: int = 7, **overrides) -> tuple[AttentionTrace, GenSpec]:
    """The reference workload: 2 layers x 8 heads, d=64, C=1024, T=32, N=64, 8+8."""
    shape = dict(num_layers=2, num_heads=8, head_dim=64, context_len=1024, text_window=32, decode_steps=64)
    gen_keys = {"concentration", "focus_set_size", "n_static"}
    shape.update({k: v for k, v in overrides.items() if k not in gen_keys})
    header = TraceHeader(**shape)
    static, dynamic = interleaved_plan(
        header.num_layers, header.num_heads, overrides.get("n_static", header.num_layers * header.num_heads // 2)
    )
    spec = GenSpec(
        seed=seed,
        planted_static=static,
        planted_dynamic=dynamic,
        concentration=overrides.get("concentration", 0.95),
        focus_set_size=overrides.get("focus_set_size", 16),
    )
    return generate_trace(spec, header), spec


def trace_summary(trace: AttentionTrace) -> str:
    h = trace.header
    return (
        f"layers={h.num_layers} heads={h.num_heads} dim={h.head_dim} ctx={h.context_len} "
        f"text={h.text_window} steps={h.decode_steps} text_tokens={int(trace.is_text().sum())}"
    )


def iter_heads(trace: AttentionTrace) -> Iterable[tuple[int, int]]:
    return iter(trace.heads())
