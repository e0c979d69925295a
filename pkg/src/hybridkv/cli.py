"""Command-line front end: ``gen``, ``run``, ``compare`` and ``sweep``.

Exit codes: 0 success, 1 usage error, 2 runtime/data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .engine import ALL_STRATEGIES, CSV_COLUMNS, EngineConfig, Strategy, run_strategy, write_csv
from .errors import BudgetError, HybridKVError, InfeasibleSpecError, TraceFormatError
from .trace import GenSpec, TraceHeader, generate_trace, interleaved_plan, read_trace, trace_summary, write_trace

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

SWEEP_PARAMS = {
    "theta": "theta",
    "r": "r",
    "alpha": "alpha",
    "budget_ratio": "budget_ratio",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--budget", type=float, default=0.10, help="KV budget as a fraction of the full cache")
    p.add_argument("--theta", type=float, default=0.90, help="sparsity score threshold")
    p.add_argument("--r", type=float, default=0.75, help="share coefficient for dynamic heads")
    p.add_argument("--alpha", type=float, default=0.5, help="base vs score-proportional static budget blend")
    p.add_argument("--chunk-size", type=int, default=8)
    p.add_argument("--window", type=int, default=None, help="observation window (default 32, or C/8 when C < 64)")
    p.add_argument("--k", type=int, default=None, help="top-k for sparsity scoring (default ceil(0.05*C))")
    p.add_argument("--threshold-mode", choices=("absolute", "quantile"), default="absolute")


def _config_from(args, **override) -> EngineConfig:
    kw = dict(
        budget_ratio=args.budget,
        theta=args.theta,
        r=args.r,
        alpha=args.alpha,
        chunk_size=args.chunk_size,
        window=args.window,
        k=args.k,
        threshold_mode=args.threshold_mode,
    )
    kw.update(override)
    try:
        return EngineConfig(**kw)
    except (BudgetError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _print_config(config: EngineConfig, trace, out=None) -> None:
    out = out or sys.stdout
    print("# effective config", file=out)
    for key, value in config.effective(trace).items():
        print(f"#   {key} = {value}", file=out)


def _load(path: str):
    if not Path(path).exists():
        raise FileNotFoundError(f"trace file not found: {path}")
    return read_trace(path)


def _parse_strategies(text: str | None) -> list[Strategy]:
    if not text:
        return list(ALL_STRATEGIES)
    try:
        return [Strategy(s.strip()) for s in text.split(",") if s.strip()] or list(ALL_STRATEGIES)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# --------------------------------------------------------------------------


def cmd_gen(args) -> int:
    header = TraceHeader(
        num_layers=args.layers,
        num_heads=args.heads,
        head_dim=args.dim,
        context_len=args.ctx,
        text_window=args.text,
        decode_steps=args.steps,
    )
    try:
        header.validate()
    except TraceFormatError as exc:
        raise UsageError(str(exc)) from exc
    total = args.layers * args.heads
    if args.spec:
        spec = GenSpec.from_json(Path(args.spec).read_text())
    else:
        n_static = args.static
        n_dynamic = total - n_static if args.dynamic is None else args.dynamic
        if n_static + n_dynamic > total or n_static > total:
            raise UsageError("planted sets exceed head count")
        if n_static + n_dynamic < total or n_static < 0 or n_dynamic < 0:
            raise UsageError("planted sets must cover every (layer, head)")
        static, dynamic = interleaved_plan(args.layers, args.heads, n_static)
        spec = GenSpec(
            seed=args.seed,
            planted_static=static,
            planted_dynamic=dynamic,
            concentration=args.concentration,
            focus_set_size=args.focus,
        )
    try:
        spec.validate(header)
    except InfeasibleSpecError as exc:
        raise UsageError(str(exc)) from exc
    trace = generate_trace(spec, header)
    n = write_trace(trace, args.output)
    if args.spec_out:
        Path(args.spec_out).write_text(spec.to_json() + "\n")
    print(f"wrote {args.output} ({n} bytes)")
    print(trace_summary(trace))
    print(f"planted static  {sorted(spec.planted_static)}")
    print(f"planted dynamic {sorted(spec.planted_dynamic)}")
    print(f"seed={spec.seed} concentration={spec.concentration} focus_set_size={spec.focus_set_size}")
    return EXIT_OK


def cmd_run(args) -> int:
    config = _config_from(args)
    strategy = _parse_strategies(args.strategy)[0]
    trace = _load(args.trace)
    _print_config(config, trace)
    report = run_strategy(trace, config, strategy)
    out = args.output or f"{Path(args.trace).stem}.{strategy.value}.json"
    Path(out).write_text(report.to_json() + "\n")
    agg = report.fidelity.get("aggregate", {})
    mean_cos = agg.get("mean_cosine")
    print(f"strategy          {report.strategy}")
    rf = report.reduction_factor
    print(f"reduction_factor  {'n/a' if rf is None else f'{rf:.3f}'}")
    print(f"mean_cosine       {'n/a' if mean_cos is None else f'{mean_cos:.6f}'}")
    print(f"transfer_bytes    {report.total_transfer_bytes}")
    print(f"report            {out}")
    return EXIT_OK


def _pretty(rows: list[dict]) -> str:
    cols = ("strategy", "mean_cosine", "min_cosine", "mean_l2", "reduction_factor", "fast_tier_peak_bytes", "total_transfer_bytes")
    fmt = []
    for row in rows:
        cells = []
        for c in cols:
            v = row.get(c)
            cells.append(f"{v:.3f}" if isinstance(v, float) else ("-" if v is None else str(v)))
        fmt.append(cells)
    widths = [max(len(c), *(len(r[i]) for r in fmt)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in fmt]
    return "\n".join(lines)


def cmd_compare(args) -> int:
    config = _config_from(args)
    strategies = _parse_strategies(args.strategies)
    trace = _load(args.trace)
    _print_config(config, trace)
    rows = [run_strategy(trace, config, s).csv_row() for s in strategies]
    print(_pretty(rows))
    text = write_csv(rows)
    if args.output:
        Path(args.output).write_text(text)
    else:
        print()
        print(text, end="")
    return EXIT_OK


def _parse_values(param: str, text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --values: {exc}") from exc
    if not values:
        raise UsageError("--values must not be empty")
    for v in values:
        ok = {
            "theta": 0 < v < 1,
            "r": v > 0,
            "alpha": 0 < v < 1,
            "budget_ratio": 0 < v <= 1,
        }[param]
        if not ok:
            raise UsageError(f"{param}={v} outside its valid domain")
    return values


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("HYBRIDKV_THREADS", "1")))
    except ValueError:
        return 1


def sweep_rows(trace, base: EngineConfig, param: str, values: list[float], strategy: Strategy) -> list[dict]:
    """One CSV row per value, in input order; infeasible values are marked, not raised."""

    def one(value: float) -> dict:
        kw = {k: getattr(base, k) for k in base.__dataclass_fields__}
        kw[SWEEP_PARAMS[param]] = value
        head = {"param": param, "value": value}
        try:
            row = run_strategy(trace, EngineConfig(**kw), strategy).csv_row()
        except BudgetError:
            eff = EngineConfig(**kw).effective(trace)
            row = {c: None for c in CSV_COLUMNS}
            row.update({k: eff[k] for k in ("budget_ratio", "theta", "r", "alpha", "chunk_size", "window", "k")})
            row.update(strategy=strategy.value, steps=trace.N, status="infeasible")
        return {**head, **row}

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        return list(pool.map(one, values))


def cmd_sweep(args) -> int:
    base = _config_from(args)
    values = _parse_values(args.param, args.values)
    strategy = _parse_strategies(args.strategy)[0]
    trace = _load(args.trace)
    _print_config(base, trace)
    rows = sweep_rows(trace, base, args.param, values, strategy)
    text = write_csv(rows, extra_columns=("param", "value"))
    if args.output:
        Path(args.output).write_text(text)
        print(f"wrote {args.output} ({len(rows)} rows)")
    else:
        print(text, end="")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybridkv", description="Hybrid static/dynamic KV cache compression on attention traces.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic trace")
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--heads", type=int, default=8)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--ctx", type=int, default=1024)
    g.add_argument("--text", type=int, default=32)
    g.add_argument("--steps", type=int, default=64)
    g.add_argument("--static", type=int, default=8, help="number of planted static heads")
    g.add_argument("--dynamic", type=int, default=None, help="number of planted dynamic heads (default: the rest)")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--concentration", type=float, default=0.95)
    g.add_argument("--focus", type=int, default=16, help="anchor tokens per static head")
    g.add_argument("--spec", default=None, help="read the GenSpec from this JSON sidecar instead of flags")
    g.add_argument("--spec-out", default=None, help="also write the GenSpec JSON sidecar here")
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run one strategy and write a JSON report")
    r.add_argument("trace")
    r.add_argument("--strategy", default="hybrid", choices=[s.value for s in Strategy])
    _add_config_flags(r)
    r.add_argument("-o", "--output", default=None)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run several strategies at one config")
    c.add_argument("trace")
    c.add_argument("--strategies", default="", help="comma list; empty means all five")
    _add_config_flags(c)
    c.add_argument("-o", "--output", default=None, help="CSV destination")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="vary one hyperparameter, hold the rest")
    s.add_argument("trace")
    s.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--strategy", default="hybrid", choices=[x.value for x in Strategy])
    _add_config_flags(s)
    s.add_argument("-o", "--output", default=None, help="CSV destination")
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hybridkv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HybridKVError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"hybridkv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
