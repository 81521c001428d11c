"""Recompute-token selection for both serving phases, plus baselines.

Prefill selection ranks reused tokens by cumulative attention mass times
value deviation and recomputes the top slice; decode selection rescores
the still-stale tokens against the current decode token's attention each
step, so tokens that gain attention late still get corrected.  Baseline
strategies (deviation magnitude, positional, random, and an exact
leave-one-in oracle) are included for comparison studies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from kvlab.errors import ParameterError, ShapeError
from kvlab.deviation import v_impact_scores
from kvlab.model import attention_forward, softmax_rows


class Strategy(str, Enum):
    ATTENTION_WEIGHTED = "attention_weighted"
    MAGNITUDE = "magnitude"
    POSITIONAL = "positional"
    RANDOM = "random"
    IDEAL = "ideal"


class SelectionMode(str, Enum):
    ORACLE = "oracle"
    PRACTICAL = "practical"


@dataclass(frozen=True)
class SelectionConfig:
    ratio: float = 0.2
    n_extra: int = 3
    mode: SelectionMode = SelectionMode.PRACTICAL
    strategy: Strategy = Strategy.ATTENTION_WEIGHTED
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ParameterError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.n_extra < 0:
            raise ParameterError(f"n_extra must be >= 0, got {self.n_extra}")

    def budget(self, n_reused: int) -> int:
        return min(math.ceil(self.ratio * n_reused), n_reused)


@dataclass
class SelectionResult:
    """Chosen token positions (ascending) and the scores that ranked them."""

    indices: tuple[int, ...]
    scores: np.ndarray


def _take_top(scores: np.ndarray, eligible, count: int) -> tuple[int, ...]:
    """Top `count` eligible positions by score, ties broken by lower index."""
    ranked = sorted(eligible, key=lambda i: (-scores[i], i))
    return tuple(sorted(ranked[:count]))


def select_prefill(q, k, delta_v, reused, config: SelectionConfig,
                   causal: bool = True) -> SelectionResult:
    """Rank reused tokens by attention-weighted value deviation, keep top r."""
    reused = sorted(set(int(i) for i in reused))
    if not reused:
        raise ParameterError("reused set is empty")
    scores = v_impact_scores(q, k, delta_v, causal=causal)
    indices = _take_top(scores, reused, config.budget(len(reused)))
    return SelectionResult(indices, scores)


def select_decode_step(q_t, k, delta_v, eligible, n_extra: int) -> SelectionResult:
    """Rescore stale tokens against the current decode token's attention.

    score_i = softmax(q_t k^T / sqrt(d_k))_i * ||delta_v_i||_1, restricted
    to the eligible (reused, not yet recomputed) positions.  Softmax
    weights are averaged over heads when a head axis is present.
    """
    q_t = np.atleast_2d(np.asarray(q_t, float))
    k = np.asarray(k, float)
    delta_v = np.asarray(delta_v, float)
    if k.ndim == 2:
        k = k[None]
        delta_v = delta_v[None]
    if q_t.shape[0] != k.shape[0] or q_t.shape[-1] != k.shape[-1]:
        raise ShapeError(f"q_t {q_t.shape} incompatible with k {k.shape}")
    n = k.shape[1]
    eligible = sorted(set(int(i) for i in eligible))
    if not eligible or n_extra <= 0:
        return SelectionResult((), np.zeros(n))
    d_k = q_t.shape[-1]
    logits = np.einsum("hd,hnd->hn", q_t, k) / math.sqrt(d_k)
    weights = softmax_rows(logits).mean(axis=0)
    dv_l1 = np.abs(delta_v).sum(axis=-1).sum(axis=0)
    scores = weights * dv_l1
    indices = _take_top(scores, eligible, min(n_extra, len(eligible)))
    return SelectionResult(indices, scores)


def _spans(positions: list[int]) -> list[list[int]]:
    """Contiguous runs of an ascending position list."""
    runs: list[list[int]] = []
    for p in positions:
        if runs and p == runs[-1][-1] + 1:
            runs[-1].append(p)
        else:
            runs.append([p])
    return runs


def _positional_selection(reused: list[int], config: SelectionConfig) -> tuple[int, ...]:
    """Leading positions of each reused span, trimmed/padded to the budget."""
    budget = config.budget(len(reused))
    chosen: list[int] = []
    for span in _spans(reused):
        chosen.extend(span[: math.ceil(config.ratio * len(span))])
    if len(chosen) > budget:
        chosen = sorted(chosen)[:budget]
    elif len(chosen) < budget:
        rest = [p for p in reused if p not in set(chosen)]
        chosen.extend(rest[: budget - len(chosen)])
    return tuple(sorted(chosen))


def select_baseline(strategy: Strategy, q, k, v, delta_k, delta_v, reused,
                    config: SelectionConfig, causal: bool = True) -> SelectionResult:
    """Run one of the comparison strategies over the same reuse scenario.

    ``k``/``v`` are the fresh matrices and ``delta_k``/``delta_v`` the
    cached-minus-fresh increments (rows outside ``reused`` zero).  The
    deviation-aware strategy scores against the perturbed key matrix, the
    one actually available when serving.
    """
    try:
        strategy = Strategy(strategy)
    except ValueError:
        raise ParameterError(f"unknown strategy: {strategy!r}") from None
    reused = sorted(set(int(i) for i in reused))
    if not reused:
        raise ParameterError("reused set is empty")
    k = np.asarray(k, float)
    v = np.asarray(v, float)
    delta_k = np.asarray(delta_k, float)
    delta_v = np.asarray(delta_v, float)
    n = k.shape[-2]
    budget = config.budget(len(reused))

    if strategy is Strategy.ATTENTION_WEIGHTED:
        return select_prefill(q, k + delta_k, delta_v, reused, config, causal=causal)

    if strategy is Strategy.MAGNITUDE:
        scores = np.abs(delta_v).sum(axis=-1) + np.abs(delta_k).sum(axis=-1)
        if scores.ndim == 2:
            scores = scores.sum(axis=0)
        return SelectionResult(_take_top(scores, reused, budget), scores)

    if strategy is Strategy.POSITIONAL:
        return SelectionResult(_positional_selection(reused, config), np.zeros(n))

    if strategy is Strategy.RANDOM:
        gen = np.random.Generator(np.random.Philox(key=config.seed))
        scores = np.zeros(n)
        scores[reused] = gen.uniform(size=len(reused))
        return SelectionResult(_take_top(scores, reused, budget), scores)

    if strategy is Strategy.IDEAL:
        base, _ = attention_forward(q, k, v, causal=causal)
        scores = np.zeros(n)
        for i in reused:
            k_one = k.copy()
            v_one = v.copy()
            k_one[..., i, :] += delta_k[..., i, :]
            v_one[..., i, :] += delta_v[..., i, :]
            perturbed, _ = attention_forward(q, k_one, v_one, causal=causal)
            scores[i] = np.linalg.norm(perturbed - base)
        return SelectionResult(_take_top(scores, reused, budget), scores)

    raise ParameterError(f"unknown strategy: {strategy}")
