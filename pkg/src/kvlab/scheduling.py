"""Cache-aware request batching with a concave latency model.

Requests are sorted by cache hit rate (descending) and sliced into
consecutive batches, so high-hit-rate requests are not stuck behind full
recomputes of low-hit-rate ones.  Batch latency is a pluggable decreasing
concave function of the batch's mean hit rate; an exhaustive-partition
oracle is provided to certify optimality on small instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from kvlab.errors import ParameterError


@dataclass
class Request:
    id: str
    arrival_ms: float
    tokens: list[int] = field(default_factory=list)
    decode_steps: int = 0
    hit_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.hit_rate <= 1.0:
            raise ParameterError(f"hit_rate must lie in [0, 1], got {self.hit_rate}")
        if self.arrival_ms < 0:
            raise ParameterError(f"arrival_ms must be >= 0, got {self.arrival_ms}")
        if self.decode_steps < 0:
            raise ParameterError(f"decode_steps must be >= 0, got {self.decode_steps}")


@dataclass
class Batch:
    requests: list[Request]

    @property
    def mean_hit_rate(self) -> float:
        return sum(r.hit_rate for r in self.requests) / len(self.requests)

    @property
    def max_tokens(self) -> int:
        return max((len(r.tokens) for r in self.requests), default=0)

    def __len__(self) -> int:
        return len(self.requests)


@dataclass(frozen=True)
class LatencyModel:
    """f(h) = t_base + t_comp * (1 - h)^p, plus an optional per-token term.

    Decreasing and concave on [0, 1] for p in (0, 1].  Larger exponents can
    be constructed (for counterexample studies) but fail the concavity
    check.
    """

    t_base_ms: float = 10.0
    t_comp_ms: float = 100.0
    exponent: float = 0.5
    per_token_ms: float = 0.0

    def __post_init__(self):
        if self.t_base_ms < 0 or self.t_comp_ms < 0 or self.per_token_ms < 0:
            raise ParameterError("latency coefficients must be >= 0")
        if self.exponent <= 0:
            raise ParameterError(f"exponent must be > 0, got {self.exponent}")

    def latency(self, hit_rate: float) -> float:
        return self.t_base_ms + self.t_comp_ms * (1.0 - hit_rate) ** self.exponent

    def is_concave(self, grid_points: int = 33, tol: float = 1e-9) -> bool:
        """Numeric check: decreasing plus midpoint concavity on a grid."""
        grid = np.linspace(0.0, 1.0, grid_points)
        f = np.array([self.latency(h) for h in grid])
        if np.any(np.diff(f) > tol):
            return False
        for i in range(grid_points):
            for j in range(i + 1, grid_points):
                mid = self.latency((grid[i] + grid[j]) / 2.0)
                if mid + tol < (f[i] + f[j]) / 2.0:
                    return False
        return True


def batch_latency(batch: Batch, model: LatencyModel) -> float:
    """Latency of one batch: f(mean hit rate) + per-token term * longest request."""
    if len(batch) == 0:
        raise ParameterError("batch is empty")
    return model.latency(batch.mean_hit_rate) + model.per_token_ms * batch.max_tokens


def total_latency(batches, model: LatencyModel) -> float:
    return sum(batch_latency(b, model) for b in batches)


def _slice_into_batches(ordered: list[Request], batch_size: int) -> list[Batch]:
    return [Batch(ordered[i : i + batch_size])
            for i in range(0, len(ordered), batch_size)]


def schedule(queue, batch_size: int, aging_lambda: float = 0.0,
             now_ms: float = 0.0) -> list[Batch]:
    """Sort by hit rate descending, then slice off the top batch_size repeatedly.

    Ties keep arrival order (then request id, so the result depends only
    on the multiset of requests).  ``aging_lambda`` > 0 boosts the
    effective hit rate of long-waiting requests
    (h + aging_lambda * wait_ms) as a starvation guard; the default 0
    leaves pure hit-rate priority.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    if aging_lambda < 0:
        raise ParameterError(f"aging_lambda must be >= 0, got {aging_lambda}")

    def effective(r: Request) -> float:
        return r.hit_rate + aging_lambda * max(0.0, now_ms - r.arrival_ms)

    ordered = sorted(queue, key=lambda r: (-effective(r), r.arrival_ms, r.id))
    return _slice_into_batches(ordered, batch_size)


def fcfs_schedule(queue, batch_size: int) -> list[Batch]:
    """Arrival-order slicing: the hit-rate-agnostic baseline."""
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    ordered = sorted(queue, key=lambda r: (r.arrival_ms, r.id))
    return _slice_into_batches(ordered, batch_size)


def optimal_batches_bruteforce(requests, batch_size: int,
                               model: LatencyModel) -> tuple[list[Batch], float]:
    """Exhaustive search over all partitions into batches of size <= batch_size.

    Factorially expensive; guarded to at most 10 requests.  Returns a
    global minimizer and its total latency.
    """
    requests = list(requests)
    if len(requests) > 10:
        raise ParameterError("bruteforce oracle is limited to 10 requests")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    if not requests:
        return [], 0.0

    best: tuple[float, list[list[Request]]] | None = None

    def explore(remaining: tuple[int, ...], blocks: list[list[Request]], cost: float):
        nonlocal best
        if best is not None and cost >= best[0]:
            return
        if not remaining:
            if best is None or cost < best[0]:
                best = (cost, [list(b) for b in blocks])
            return
        first, rest = remaining[0], remaining[1:]
        for extra in range(min(batch_size - 1, len(rest)) + 1):
            for combo in itertools.combinations(rest, extra):
                block = [requests[first]] + [requests[i] for i in combo]
                new_remaining = tuple(i for i in rest if i not in combo)
                explore(new_remaining, blocks + [block],
                        cost + batch_latency(Batch(block), model))

    explore(tuple(range(len(requests))), [], 0.0)
    assert best is not None
    return [Batch(b) for b in best[1]], best[0]
