import numpy as np
import pytest

from hybridkv.trace import AttentionTrace, GenSpec, TokenKind, TraceHeader, generate_trace, interleaved_plan, standard_trace

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def standard():
    """The reference workload (seed 7) and its GenSpec."""
    return standard_trace(7)


@pytest.fixture(scope="session")
def small():
    header = TraceHeader(num_layers=2, num_heads=4, head_dim=32, context_len=256, text_window=16, decode_steps=24)
    static, dynamic = interleaved_plan(2, 4, 4)
    spec = GenSpec(seed=11, planted_static=static, planted_dynamic=dynamic, concentration=0.95, focus_set_size=8)
    return generate_trace(spec, header), spec


def make_trace(prefill_q, prefill_k, prefill_v=None, kinds=None, text_window=1, decode=None):
    """Single-head trace from explicit [C, d] arrays."""
    prefill_q = np.asarray(prefill_q, dtype=np.float32)
    prefill_k = np.asarray(prefill_k, dtype=np.float32)
    C, d = prefill_k.shape
    if prefill_v is None:
        prefill_v = np.zeros((C, d), dtype=np.float32)
    if kinds is None:
        kinds = np.full(C, TokenKind.VISUAL, dtype=np.uint8)
        kinds[C - text_window:] = TokenKind.TEXT
    if decode is None:
        dq = dk = dv = np.zeros((0, 1, 1, d), dtype=np.float32)
    else:
        dq, dk, dv = (np.asarray(a, dtype=np.float32).reshape(-1, 1, 1, d) for a in decode)
    header = TraceHeader(1, 1, d, C, text_window, dq.shape[0])
    return AttentionTrace(
        header=header,
        token_types=kinds,
        prefill_q=np.asarray(prefill_q).reshape(1, 1, C, d),
        prefill_k=prefill_k.reshape(1, 1, C, d),
        prefill_v=np.asarray(prefill_v, dtype=np.float32).reshape(1, 1, C, d),
        decode_q=dq,
        decode_k=dk,
        decode_v=dv,
    )


@pytest.fixture
def trace_factory():
    return make_trace


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    number, text = marker.args
    outcome = "PASS" if call.excinfo is None else "FAIL"
    _ACCEPTANCE.append((number, item.name, text, outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, text, outcome in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"[{outcome}] criterion {number}: {text} ({name})")
