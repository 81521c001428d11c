"""Request traces: line-delimited records plus a seeded synthetic generator.

Trace files hold one JSON object per line with keys ``id``, ``arrival_ms``,
``tokens``, ``decode_steps``; blank lines and ``#``-prefixed comment lines
are ignored.  The generator emulates multi-tenant redundancy by drawing
token chunks from a shared library with a configurable overlap rate, and
has a bimodal mode (half duplicate requests, half fresh) for scheduler
ablations.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from kvlab.errors import TraceError


@dataclass
class TraceRecord:
    id: str
    arrival_ms: float
    tokens: list[int]
    decode_steps: int = 0
    hit_rate: float | None = None  # only consulted by pure scheduling runs

    def validate(self, line: int | None = None) -> None:
        if not self.id:
            raise TraceError("record id is empty", line)
        if self.arrival_ms < 0:
            raise TraceError(f"arrival_ms {self.arrival_ms} is negative", line)
        if not self.tokens:
            raise TraceError("token list is empty", line)
        if any((not isinstance(t, int)) or t < 0 for t in self.tokens):
            raise TraceError("tokens must be non-negative integers", line)
        if self.decode_steps < 0:
            raise TraceError(f"decode_steps {self.decode_steps} is negative", line)
        if self.hit_rate is not None and not 0.0 <= self.hit_rate <= 1.0:
            raise TraceError(f"hit_rate {self.hit_rate} outside [0, 1]", line)


def ingest_trace(path) -> list[TraceRecord]:
    """Parse, validate, and sort a trace file by arrival time."""
    records: list[TraceRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(obj, dict):
                raise TraceError("record is not an object", lineno)
            unknown = set(obj) - {"id", "arrival_ms", "tokens", "decode_steps", "hit_rate"}
            if unknown:
                raise TraceError(f"unknown keys {sorted(unknown)}", lineno)
            try:
                hit = obj.get("hit_rate")
                record = TraceRecord(
                    id=str(obj["id"]),
                    arrival_ms=float(obj["arrival_ms"]),
                    tokens=list(obj["tokens"]),
                    decode_steps=int(obj.get("decode_steps", 0)),
                    hit_rate=None if hit is None else float(hit),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise TraceError(f"bad record: {exc}", lineno) from None
            record.validate(lineno)
            records.append(record)
    records.sort(key=lambda r: (r.arrival_ms, r.id))
    return records


def write_trace(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            obj = {k: v for k, v in asdict(record).items() if v is not None}
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def generate_trace(num_requests: int = 16, seed: int = 0, vocab_size: int = 4096,
                   chunk_len: int = 16, library_size: int = 8, segments: int = 3,
                   overlap: float = 0.5, decode_steps: int = 8,
                   arrival_gap_ms: float = 50.0) -> list[TraceRecord]:
    """Requests assembled from a shared chunk library plus private tokens.

    Each request concatenates ``segments`` chunks; a chunk is drawn from
    the library with probability ``overlap`` and freshly random otherwise,
    so later requests can partially hit earlier ones.
    """
    rng = np.random.default_rng(seed)
    library = [rng.integers(0, vocab_size, chunk_len).tolist()
               for _ in range(library_size)]
    records = []
    for i in range(num_requests):
        tokens: list[int] = []
        for _ in range(segments):
            if rng.uniform() < overlap:
                tokens += library[int(rng.integers(library_size))]
            else:
                tokens += rng.integers(0, vocab_size, chunk_len).tolist()
        records.append(TraceRecord(
            id=f"r{i:04d}",
            arrival_ms=round(i * arrival_gap_ms, 6),
            tokens=tokens,
            decode_steps=decode_steps,
        ))
    return records


def generate_bimodal_trace(num_pairs: int = 8, seed: int = 0, vocab_size: int = 4096,
                           chunk_len: int = 16, segments: int = 2,
                           providers: int = 4, warmup_ms: float = 2000.0,
                           burst_gap_ms: float = 1.0,
                           decode_steps: int = 0) -> list[TraceRecord]:
    """Warm-up providers, then an interleaved burst of duplicates and fresh requests.

    Providers arrive first and populate the pool; after ``warmup_ms`` an
    alternating burst of exact duplicates (hit rate 1) and fresh random
    requests (hit rate 0) lands, which is the hit-rate mix a hit-rate-aware
    scheduler separates and an arrival-order scheduler does not.
    """
    rng = np.random.default_rng(seed)
    records = []
    provider_tokens = []
    for i in range(providers):
        tokens = rng.integers(0, vocab_size, chunk_len * segments).tolist()
        provider_tokens.append(tokens)
        records.append(TraceRecord(
            id=f"warm{i:03d}", arrival_ms=round(i * 120.0, 6),
            tokens=tokens, decode_steps=0,
        ))
    for j in range(num_pairs):
        dup = provider_tokens[j % providers]
        records.append(TraceRecord(
            id=f"hit{j:03d}",
            arrival_ms=round(warmup_ms + (2 * j) * burst_gap_ms, 6),
            tokens=list(dup), decode_steps=decode_steps,
        ))
        records.append(TraceRecord(
            id=f"miss{j:03d}",
            arrival_ms=round(warmup_ms + (2 * j + 1) * burst_gap_ms, 6),
            tokens=rng.integers(0, vocab_size, chunk_len * segments).tolist(),
            decode_steps=decode_steps,
        ))
    return records
