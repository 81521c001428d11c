"""kvlab: a desk-scale laboratory for cross-request KV-cache reuse.

Deterministic toy attention model, adaptive rolling-hash token matching,
selective-recomputation token scoring, a persistent KV pool, cache-aware
batch scheduling, and a discrete-event serving simulator tying them
together.
"""

from kvlab.deviation import (
    DeviationReport,
    Perturbation,
    delta_h_exact,
    delta_h_first_order,
    impact_overlap,
    k_impact_scores,
    layer_retention,
    v_impact_scores,
)
from kvlab.engine import ReuseSession, prefill_with_selection, run_generation
from kvlab.matching import (
    HashParams,
    MatchResult,
    build_hash_index,
    fixed_chunk_match,
    hit_rate,
    match_sequences,
    rolling_hash,
)
from kvlab.model import (
    LayerStates,
    ModelConfig,
    ToyModel,
    attention_forward,
    init_model,
    model_forward,
    model_forward_with_reuse,
)
from kvlab.pool import CachePool, KVEntry, ReuseMap
from kvlab.scheduling import (
    Batch,
    LatencyModel,
    Request,
    batch_latency,
    fcfs_schedule,
    optimal_batches_bruteforce,
    schedule,
    total_latency,
)
from kvlab.selection import (
    SelectionConfig,
    SelectionMode,
    SelectionResult,
    Strategy,
    select_baseline,
    select_decode_step,
    select_prefill,
)
from kvlab.simulate import (
    MatcherKind,
    MetricsReport,
    SchedulerKind,
    SimConfig,
    SimMode,
    emit_report,
    run_simulation,
)
from kvlab.trace import TraceRecord, generate_bimodal_trace, generate_trace, ingest_trace

__version__ = "0.1.0"

__all__ = [
    "Batch", "CachePool", "DeviationReport", "HashParams", "KVEntry",
    "LatencyModel", "LayerStates", "MatchResult", "MatcherKind",
    "MetricsReport", "ModelConfig", "Perturbation", "Request", "ReuseMap",
    "ReuseSession", "SchedulerKind", "SelectionConfig", "SelectionMode",
    "SelectionResult", "SimConfig", "SimMode", "Strategy", "ToyModel",
    "TraceRecord", "attention_forward", "batch_latency", "build_hash_index",
    "delta_h_exact", "delta_h_first_order", "emit_report", "fcfs_schedule",
    "fixed_chunk_match", "generate_bimodal_trace", "generate_trace",
    "hit_rate", "impact_overlap", "ingest_trace", "init_model",
    "k_impact_scores", "layer_retention", "match_sequences", "model_forward",
    "model_forward_with_reuse", "optimal_batches_bruteforce",
    "prefill_with_selection", "rolling_hash", "run_generation",
    "run_simulation", "schedule", "select_baseline", "select_decode_step",
    "select_prefill", "total_latency", "v_impact_scores",
]
