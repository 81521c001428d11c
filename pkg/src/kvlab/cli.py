"""Command-line front end.

Subcommands:
    match      hit-rate comparison of two token files (adaptive vs fixed)
    deviate    first-order convergence study over seeded instances
    select     recompute-strategy comparison table
    schedule   cache-aware vs FCFS vs brute-force batching on a request list
    simulate   full pipeline over a trace file
    gen-trace  seeded synthetic trace generator

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from kvlab.errors import KVLabError
from kvlab.matching import HashParams, fixed_chunk_match, hit_rate, match_sequences
from kvlab.model import ModelConfig
from kvlab.pool import CachePool
from kvlab.scheduling import (
    LatencyModel,
    Request,
    fcfs_schedule,
    optimal_batches_bruteforce,
    schedule,
    total_latency,
)
from kvlab.selection import SelectionMode, Strategy
from kvlab.simulate import (
    MatcherKind,
    SchedulerKind,
    SimConfig,
    SimMode,
    emit_report,
    run_simulation,
)
from kvlab.studies import convergence_study, strategy_study
from kvlab.trace import generate_bimodal_trace, generate_trace, ingest_trace, write_trace


class _UsageError(KVLabError, ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{message}\n{self.format_usage()}")


def _read_tokens(path: str) -> list[int]:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        return [int(tok) for tok in text.split()]
    except ValueError as exc:
        raise _UsageError(f"{path}: token files hold whitespace-separated integers ({exc})")


def _parse_config_file(path: str) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment; keys mirror CLI flags."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise _UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


_SIM_KEYS = {
    "mode": str, "strategy": str, "scheduler": str, "matcher": str,
    "selection_mode": str, "ratio": float, "n_extra": int, "batch_size": int,
    "window_size": int, "chunk_size": int, "num_layers": int, "num_heads": int,
    "d_model": int, "vocab_size": int, "model_seed": int, "t_base_ms": float,
    "t_comp_ms": float, "exponent": float, "per_token_ms": float,
    "capacity_bytes": int, "seed": int,
}


def _build_sim_config(args) -> SimConfig:
    values: dict = {}
    if args.config:
        for key, raw in _parse_config_file(args.config).items():
            if key not in _SIM_KEYS:
                raise _UsageError(f"unknown config key: {key}")
            values[key] = _SIM_KEYS[key](raw)
    for key in _SIM_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    model = ModelConfig(
        num_layers=values.get("num_layers", 4),
        num_heads=values.get("num_heads", 4),
        d_model=values.get("d_model", 64),
        vocab_size=values.get("vocab_size", 4096),
        seed=values.get("model_seed", 0),
    )
    latency = LatencyModel(
        t_base_ms=values.get("t_base_ms", 10.0),
        t_comp_ms=values.get("t_comp_ms", 100.0),
        exponent=values.get("exponent", 0.5),
        per_token_ms=values.get("per_token_ms", 0.0),
    )
    return SimConfig(
        mode=SimMode(values.get("mode", "selective")),
        strategy=Strategy(values.get("strategy", "attention_weighted")),
        ratio=values.get("ratio", 0.2),
        n_extra=values.get("n_extra", 3),
        batch_size=values.get("batch_size", 4),
        scheduler=SchedulerKind(values.get("scheduler", "cache_aware")),
        matcher=MatcherKind(values.get("matcher", "adaptive")),
        selection_mode=SelectionMode(values.get("selection_mode", "practical")),
        window_size=values.get("window_size", 8),
        chunk_size=values.get("chunk_size"),
        model=model,
        latency=latency,
        capacity_bytes=values.get("capacity_bytes"),
        seed=values.get("seed", 0),
    )


def _cmd_match(args) -> int:
    target = _read_tokens(args.target)
    candidate = _read_tokens(args.candidate)
    params = HashParams(window_size=args.window)
    adaptive = match_sequences(target, candidate, params)
    chunk = args.chunk_size or args.window
    fixed = fixed_chunk_match(target, candidate, chunk)
    payload = {
        "adaptive": {
            "target_matches": adaptive.target_matches,
            "candidate_matches": adaptive.candidate_matches,
            "hit_rate": hit_rate(target, adaptive.target_matches),
        },
        "fixed": {
            "target_matches": fixed.target_matches,
            "candidate_matches": fixed.candidate_matches,
            "hit_rate": hit_rate(target, fixed.target_matches),
        },
        "window": args.window,
        "chunk_size": chunk,
    }
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
    print(f"adaptive hit rate: {payload['adaptive']['hit_rate']:.4f} "
          f"({len(adaptive)} positions)")
    print(f"fixed    hit rate: {payload['fixed']['hit_rate']:.4f} "
          f"({len(fixed)} positions, chunk={chunk})")
    return 0


def _cmd_deviate(args) -> int:
    rows = convergence_study(n_instances=args.instances, base_seed=args.seed)
    good = 0
    print(f"{'seed':>6}  {'res(1e-2)':>12}  {'res(5e-3)':>12}  {'res(2.5e-3)':>12}  ratios")
    for row in rows:
        r = row["ratios"]
        ok = all(3.0 <= x <= 5.0 for x in r)
        good += ok
        res = row["residuals"]
        print(f"{row['seed']:>6}  {res[0]:>12.4e}  {res[1]:>12.4e}  {res[2]:>12.4e}  "
              f"{r[0]:.2f}, {r[1]:.2f}{'' if ok else '  <- outside [3,5]'}")
    print(f"instances with both ratios in [3,5]: {good}/{len(rows)}")
    return 0


def _cmd_select(args) -> int:
    results = strategy_study(n_instances=args.instances, ratio=args.ratio,
                             base_seed=args.seed)
    print(f"post-recompute deviation over {args.instances} instances, "
          f"ratio={args.ratio}")
    for strategy, values in results.items():
        print(f"  {strategy.value:10s} mean={values.mean():.6f}  "
              f"p95={np.percentile(values, 95):.6f}")
    return 0


def _cmd_schedule(args) -> int:
    records = ingest_trace(args.trace)
    missing = [r.id for r in records if r.hit_rate is None]
    if missing:
        raise _UsageError(
            f"schedule needs per-record hit_rate; missing for {missing[:3]}"
        )
    model = LatencyModel(t_base_ms=args.t_base_ms, t_comp_ms=args.t_comp_ms,
                         exponent=args.exponent)
    requests = [Request(r.id, r.arrival_ms, r.tokens, r.decode_steps, r.hit_rate)
                for r in records]
    sorted_batches = schedule(requests, args.batch_size)
    fcfs_batches = fcfs_schedule(requests, args.batch_size)
    sorted_total = total_latency(sorted_batches, model)
    fcfs_total = total_latency(fcfs_batches, model)
    print(f"cache-aware total latency: {sorted_total:.4f} ms "
          f"({[round(b.mean_hit_rate, 3) for b in sorted_batches]})")
    print(f"fcfs        total latency: {fcfs_total:.4f} ms "
          f"({[round(b.mean_hit_rate, 3) for b in fcfs_batches]})")
    if len(requests) <= 10:
        _, best = optimal_batches_bruteforce(requests, args.batch_size, model)
        print(f"brute-force optimum:       {best:.4f} ms")
    return 0


def _cmd_simulate(args) -> int:
    config = _build_sim_config(args)
    trace = ingest_trace(args.trace)
    pool = None
    if args.cache_file:
        pool = CachePool(config.model, HashParams(window_size=config.window_size),
                         config.capacity_bytes)
        try:
            pool.load(args.cache_file)
        except FileNotFoundError:
            pass  # first run: start empty, save on exit
    report = run_simulation(trace, config, pool=pool)
    if args.cache_file and pool is not None:
        pool.save(args.cache_file)
    if args.out:
        emit_report(report, args.format, args.out)
        print(f"report written to {args.out} ({args.format})")
    else:
        sys.stdout.write(report.to_json())
    agg = report.aggregate
    print(f"requests={agg['requests']} mean_ttft={agg['mean_ttft_ms']:.2f}ms "
          f"p95_ttft={agg['p95_ttft_ms']:.2f}ms mean_hit={agg['mean_hit_rate']:.3f} "
          f"tokens/s={agg['throughput_tokens_per_s']:.1f}",
          file=sys.stderr)
    return 0


def _cmd_gen_trace(args) -> int:
    if args.bimodal:
        records = generate_bimodal_trace(num_pairs=args.requests // 2 or 1,
                                         seed=args.seed,
                                         vocab_size=args.vocab_size,
                                         chunk_len=args.chunk_len,
                                         decode_steps=args.decode_steps)
    else:
        records = generate_trace(num_requests=args.requests, seed=args.seed,
                                 vocab_size=args.vocab_size,
                                 chunk_len=args.chunk_len,
                                 library_size=args.library_size,
                                 segments=args.segments,
                                 overlap=args.overlap,
                                 decode_steps=args.decode_steps,
                                 arrival_gap_ms=args.arrival_gap_ms)
    write_trace(records, args.out)
    print(f"{len(records)} records written to {args.out}")
    return 0


def _add_latency_flags(parser) -> None:
    parser.add_argument("--t-base-ms", type=float, default=10.0)
    parser.add_argument("--t-comp-ms", type=float, default=100.0)
    parser.add_argument("--exponent", type=float, default=0.5)


def build_parser() -> _Parser:
    parser = _Parser(prog="kvlab", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="match two token files")
    p.add_argument("target")
    p.add_argument("candidate")
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--chunk-size", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_match)

    p = sub.add_parser("deviate", help="first-order convergence study")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_deviate)

    p = sub.add_parser("select", help="strategy comparison table")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--ratio", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("schedule", help="batching comparison on a request list")
    p.add_argument("--trace", required=True)
    p.add_argument("--batch-size", type=int, default=2)
    _add_latency_flags(p)
    p.set_defaults(func=_cmd_schedule)

    p = sub.add_parser("simulate", help="run the full pipeline over a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--config", default=None, help="flat key = value file")
    p.add_argument("--cache-file", default=None)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", default=None)
    p.add_argument("--mode", choices=[m.value for m in SimMode], default=None)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default=None)
    p.add_argument("--scheduler", choices=[s.value for s in SchedulerKind], default=None)
    p.add_argument("--matcher", choices=[m.value for m in MatcherKind], default=None)
    p.add_argument("--selection-mode", choices=[m.value for m in SelectionMode],
                   default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--n-extra", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--window-size", type=int, default=None)
    p.add_argument("--chunk-size", type=int, default=None)
    p.add_argument("--num-layers", type=int, default=None)
    p.add_argument("--num-heads", type=int, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--model-seed", type=int, default=None)
    p.add_argument("--t-base-ms", type=float, default=None)
    p.add_argument("--t-comp-ms", type=float, default=None)
    p.add_argument("--exponent", type=float, default=None)
    p.add_argument("--per-token-ms", type=float, default=None)
    p.add_argument("--capacity-bytes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("gen-trace", help="write a synthetic trace")
    p.add_argument("--out", required=True)
    p.add_argument("--requests", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=4096)
    p.add_argument("--chunk-len", type=int, default=16)
    p.add_argument("--library-size", type=int, default=8)
    p.add_argument("--segments", type=int, default=3)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--decode-steps", type=int, default=8)
    p.add_argument("--arrival-gap-ms", type=float, default=50.0)
    p.add_argument("--bimodal", action="store_true")
    p.set_defaults(func=_cmd_gen_trace)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except KVLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
