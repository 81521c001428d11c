"""Discrete-event serving simulator over a logical-millisecond clock.

One prefill server drains the queue batch by batch: arrivals are admitted
whenever the server frees up, each admitted request gets its hit rate from
a pool lookup, the configured scheduler forms the next batch, and the
batch is charged the concave latency of its mean hit rate.  Decode runs
off the server in per-request lanes, one tick per generated token plus a
per-token penalty for every extra recomputation.  Completed requests write
their (possibly corrected) prefill K/V back to the pool.

Three execution modes: FR recomputes everything (the reference), NAIVE
reuses every matched token untouched, SELECTIVE reuses and then recomputes
the tokens the configured strategy picks.  Deviation metrics for every
request are measured against a dedicated fresh forward pass.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from kvlab.deviation import delta_h_exact
from kvlab.engine import ReuseSession, prefill_with_selection, run_generation
from kvlab.errors import ConfigError
from kvlab.matching import HashParams
from kvlab.model import ModelConfig, init_model, model_forward, model_forward_with_reuse
from kvlab.pool import CachePool
from kvlab.scheduling import (
    LatencyModel,
    Request,
    batch_latency,
    fcfs_schedule,
    schedule,
)
from kvlab.selection import SelectionConfig, SelectionMode, Strategy
from kvlab.trace import TraceRecord


class SimMode(str, Enum):
    FR = "fr"
    NAIVE = "naive"
    SELECTIVE = "selective"


class SchedulerKind(str, Enum):
    CACHE_AWARE = "cache_aware"
    FCFS = "fcfs"


class MatcherKind(str, Enum):
    ADAPTIVE = "adaptive"
    FIXED = "fixed"


@dataclass(frozen=True)
class SimConfig:
    mode: SimMode = SimMode.SELECTIVE
    strategy: Strategy = Strategy.ATTENTION_WEIGHTED
    ratio: float = 0.2             # 0 disables prefill recomputation entirely
    n_extra: int = 3
    batch_size: int = 4
    scheduler: SchedulerKind = SchedulerKind.CACHE_AWARE
    matcher: MatcherKind = MatcherKind.ADAPTIVE
    selection_mode: SelectionMode = SelectionMode.PRACTICAL
    window_size: int = 8
    chunk_size: int | None = None  # fixed matcher block; defaults to window_size
    model: ModelConfig = field(default_factory=ModelConfig)
    latency: LatencyModel = field(default_factory=LatencyModel)
    capacity_bytes: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"ratio must lie in [0, 1], got {self.ratio}")
        if self.n_extra < 0:
            raise ConfigError(f"n_extra must be >= 0, got {self.n_extra}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.window_size < 1:
            raise ConfigError(f"window_size must be >= 1, got {self.window_size}")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ConfigError(f"chunk_size must be >= 1, got {self.chunk_size}")

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("mode", "strategy", "scheduler", "matcher", "selection_mode"):
            out[key] = getattr(self, key).value
        return out


@dataclass
class RequestMetrics:
    id: str
    arrival_ms: float
    ttft_ms: float
    completion_ms: float
    hit_rate: float
    n_tokens: int
    decode_steps: int
    tokens_recomputed: int
    tokens_reused_uncorrected: int
    tokens_fresh: int
    delta_h_before: list[float]
    delta_h_after: list[float]
    decode_cum_deviation: float
    mean_tpot_ms: float


@dataclass
class MetricsReport:
    config: dict
    requests: list[RequestMetrics]
    aggregate: dict

    def to_json(self) -> str:
        payload = {
            "config": self.config,
            "requests": [asdict(r) for r in self.requests],
            "aggregate": self.aggregate,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _per_layer_norms(report) -> list[float]:
    return [float(x) for x in np.sqrt((report.norm_exact**2).sum(axis=1))]


def _decode_token_stream(config: SimConfig, request_index: int, steps: int) -> list[int]:
    seq = np.random.SeedSequence(entropy=(config.seed, request_index))
    gen = np.random.Generator(np.random.Philox(seq))
    return gen.integers(0, config.model.vocab_size, steps).tolist()


def run_simulation(trace: list[TraceRecord], config: SimConfig,
                   pool: CachePool | None = None) -> MetricsReport:
    seen_ids = set()
    for record in trace:
        record.validate()
        if record.id in seen_ids:
            raise ConfigError(f"duplicate request id in trace: {record.id!r}")
        seen_ids.add(record.id)
        if record.tokens and max(record.tokens) >= config.model.vocab_size:
            raise ConfigError(
                f"trace record {record.id!r} has token ids outside the model vocabulary"
            )
    model = init_model(config.model)
    if pool is None:
        pool = CachePool(config.model, HashParams(window_size=config.window_size),
                         config.capacity_bytes)
    chunk = config.chunk_size or config.window_size

    pending = sorted(trace, key=lambda r: (r.arrival_ms, r.id))
    indices = {rec.id: i for i, rec in enumerate(pending)}
    queue: list[Request] = []
    reuse_maps: dict[str, object] = {}
    records: dict[str, TraceRecord] = {rec.id: rec for rec in pending}
    writebacks: list = []  # heap of (completion_ms, seq, id, tokens, k, v)
    wb_seq = 0
    metrics: list[RequestMetrics] = []
    now = 0.0

    def flush_writebacks(upto: float) -> None:
        while writebacks and writebacks[0][0] <= upto:
            _, _, rid, tokens, k, v = heapq.heappop(writebacks)
            pool.insert(rid, tokens, k, v)

    while pending or queue:
        if not queue:
            now = max(now, pending[0].arrival_ms)
        flush_writebacks(now)
        while pending and pending[0].arrival_ms <= now:
            rec = pending.pop(0)
            if config.mode is SimMode.FR:
                hit = 0.0
            else:
                reuse = pool.lookup(
                    rec.tokens,
                    fixed_chunk=chunk if config.matcher is MatcherKind.FIXED else None,
                )
                reuse_maps[rec.id] = reuse
                hit = reuse.hit_rate
            queue.append(Request(rec.id, rec.arrival_ms, rec.tokens,
                                 rec.decode_steps, hit))
        if not queue:
            continue

        if config.scheduler is SchedulerKind.CACHE_AWARE:
            batch = schedule(queue, config.batch_size)[0]
        else:
            batch = fcfs_schedule(queue, config.batch_size)[0]
        chosen = {r.id for r in batch.requests}
        queue = [r for r in queue if r.id not in chosen]

        prefill_done = now + batch_latency(batch, config.latency)
        for req in batch.requests:
            rec = records[req.id]
            result = _process_request(model, config, rec, req,
                                      reuse_maps.get(req.id), prefill_done,
                                      indices[req.id])
            metrics.append(result.metrics)
            wb_seq += 1
            heapq.heappush(writebacks, (result.metrics.completion_ms, wb_seq,
                                        req.id, result.wb_tokens,
                                        result.wb_k, result.wb_v))
        now = prefill_done

    flush_writebacks(float("inf"))
    metrics.sort(key=lambda m: (m.arrival_ms, m.id))
    return MetricsReport(config.to_dict(), metrics, _aggregate(metrics))


@dataclass
class _ProcessResult:
    metrics: RequestMetrics
    wb_tokens: list[int]
    wb_k: np.ndarray
    wb_v: np.ndarray


def _process_request(model, config: SimConfig, rec: TraceRecord, req: Request,
                     reuse, prefill_done: float, request_index: int) -> _ProcessResult:
    layers = config.model.num_layers
    n = len(rec.tokens)
    decode_tokens = _decode_token_stream(config, request_index, rec.decode_steps)

    if config.mode is SimMode.FR:
        states = model_forward(rec.tokens, model)
        zeros = [0.0] * layers
        tpot = [1.0] * rec.decode_steps
        completion = prefill_done + sum(tpot)
        m = RequestMetrics(
            id=rec.id, arrival_ms=rec.arrival_ms,
            ttft_ms=round(prefill_done - rec.arrival_ms, 9),
            completion_ms=round(completion, 9),
            hit_rate=0.0, n_tokens=n, decode_steps=rec.decode_steps,
            tokens_recomputed=0, tokens_reused_uncorrected=0,
            tokens_fresh=n * layers,
            delta_h_before=zeros, delta_h_after=zeros,
            decode_cum_deviation=0.0,
            mean_tpot_ms=float(np.mean(tpot)) if tpot else 0.0,
        )
        return _ProcessResult(m, rec.tokens, states.k, states.v)

    ref_states = model_forward(rec.tokens, model)
    if reuse.sources:
        naive_states = model_forward_with_reuse(rec.tokens, model, reuse)
    else:
        naive_states = ref_states
    before = _per_layer_norms(delta_h_exact(ref_states, naive_states))

    if config.mode is SimMode.NAIVE or config.ratio == 0.0 or not reuse.sources:
        session = ReuseSession(model, rec.tokens, reuse,
                               _prefill_states=naive_states)
        eligible_extra = 0 if config.mode is SimMode.NAIVE else config.n_extra
    else:
        sel_config = SelectionConfig(ratio=config.ratio, n_extra=config.n_extra,
                                     mode=config.selection_mode,
                                     strategy=config.strategy,
                                     seed=config.seed + request_index)
        prefill = prefill_with_selection(
            model, rec.tokens, reuse, sel_config,
            ref_states=ref_states if config.selection_mode is SelectionMode.ORACLE
            else None,
        )
        session = prefill.session
        eligible_extra = config.n_extra
    after = _per_layer_norms(delta_h_exact(ref_states, session.prefill_states))

    reference = ReuseSession(model, rec.tokens)
    generation = run_generation(session, reference, decode_tokens, eligible_extra)

    tpot = [1.0 + config.latency.per_token_ms * c for c in generation.recompute_counts]
    completion = prefill_done + sum(tpot)

    reused_count = len(session.reused)
    recomputed = sum(len(s) for s in session.recomputed)
    uncorrected = sum(reused_count - len(s) for s in session.recomputed)
    fresh = (n - reused_count) * layers

    m = RequestMetrics(
        id=rec.id, arrival_ms=rec.arrival_ms,
        ttft_ms=round(prefill_done - rec.arrival_ms, 9),
        completion_ms=round(completion, 9),
        hit_rate=req.hit_rate, n_tokens=n, decode_steps=rec.decode_steps,
        tokens_recomputed=recomputed,
        tokens_reused_uncorrected=uncorrected,
        tokens_fresh=fresh,
        delta_h_before=before, delta_h_after=after,
        decode_cum_deviation=generation.cumulative_deviation,
        mean_tpot_ms=float(np.mean(tpot)) if tpot else 0.0,
    )
    n_prefill = session.n_prefill
    return _ProcessResult(m, rec.tokens,
                          session.k[:, :, :n_prefill, :].copy(),
                          session.v[:, :, :n_prefill, :].copy())


def _aggregate(metrics: list[RequestMetrics]) -> dict:
    if not metrics:
        return {"requests": 0}
    ttfts = np.array([m.ttft_ms for m in metrics])
    arrivals = np.array([m.arrival_ms for m in metrics])
    completions = np.array([m.completion_ms for m in metrics])
    total_tokens = sum(m.n_tokens + m.decode_steps for m in metrics)
    makespan_ms = float(completions.max() - arrivals.min())
    tpots = [m.mean_tpot_ms for m in metrics if m.decode_steps > 0]
    return {
        "requests": len(metrics),
        "mean_ttft_ms": float(ttfts.mean()),
        "p50_ttft_ms": float(np.percentile(ttfts, 50)),
        "p95_ttft_ms": float(np.percentile(ttfts, 95)),
        "mean_tpot_ms": float(np.mean(tpots)) if tpots else 0.0,
        "mean_hit_rate": float(np.mean([m.hit_rate for m in metrics])),
        "makespan_ms": makespan_ms,
        "throughput_tokens_per_s": (
            total_tokens / (makespan_ms / 1000.0) if makespan_ms > 0 else 0.0
        ),
        "throughput_requests_per_s": (
            len(metrics) / (makespan_ms / 1000.0) if makespan_ms > 0 else 0.0
        ),
        "tokens_recomputed_total": sum(m.tokens_recomputed for m in metrics),
        "tokens_reused_uncorrected_total": sum(
            m.tokens_reused_uncorrected for m in metrics),
        "tokens_fresh_total": sum(m.tokens_fresh for m in metrics),
        "mean_decode_cum_deviation": float(
            np.mean([m.decode_cum_deviation for m in metrics])),
    }


_CSV_COLUMNS = [
    "id", "arrival_ms", "ttft_ms", "completion_ms", "hit_rate", "n_tokens",
    "decode_steps", "tokens_recomputed", "tokens_reused_uncorrected",
    "tokens_fresh", "delta_h_before", "delta_h_after",
    "decode_cum_deviation", "mean_tpot_ms",
]


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ";".join(repr(float(x)) for x in value)
    return str(value)


def emit_report(report: MetricsReport, fmt: str, path: str) -> None:
    """Write the report: one JSON document, or per-request CSV + .agg.csv."""
    fmt = fmt.lower()
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        return
    if fmt != "csv":
        raise ConfigError(f"unknown report format: {fmt!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_CSV_COLUMNS)
    for m in report.requests:
        row = asdict(m)
        writer.writerow([_format_cell(row[c]) for c in _CSV_COLUMNS])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    agg_path = path[:-4] + ".agg.csv" if path.endswith(".csv") else path + ".agg.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["key", "value"])
    for key in sorted(report.aggregate):
        writer.writerow([key, _format_cell(report.aggregate[key])])
    with open(agg_path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
