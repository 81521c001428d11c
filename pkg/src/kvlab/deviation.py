"""Attention-output deviation analysis.

Quantifies how stale cached K/V rows corrupt attention output: the exact
deviation between two forward passes, its first-order approximation (the
attention matrix is the Jacobian of the output with respect to V; the K
direction uses the analytic softmax differential), and the per-token
impact scores that drive recompute selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from kvlab.errors import ParameterError, ShapeError
from kvlab.model import LayerStates, softmax_rows


@dataclass
class Perturbation:
    """Increments applied to K and V; rows for untouched positions are zero."""

    delta_k: np.ndarray
    delta_v: np.ndarray

    def __post_init__(self):
        self.delta_k = np.asarray(self.delta_k, float)
        self.delta_v = np.asarray(self.delta_v, float)
        if self.delta_k.shape != self.delta_v.shape:
            raise ShapeError(
                f"delta_k {self.delta_k.shape} and delta_v {self.delta_v.shape} differ"
            )

    def scaled(self, factor: float) -> "Perturbation":
        return Perturbation(self.delta_k * factor, self.delta_v * factor)


@dataclass
class DeviationReport:
    """Exact deviation per layer/head, optionally with its first-order part.

    delta_h_exact: (num_layers, num_heads, n, d_k)
    norm_exact:    (num_layers, num_heads) Frobenius norms
    """

    delta_h_exact: np.ndarray
    norm_exact: np.ndarray
    delta_h_first_order: np.ndarray | None = None
    norm_first_order: np.ndarray | None = None
    residual: np.ndarray | None = None

    @property
    def total_norm(self) -> float:
        return float(np.sqrt((self.norm_exact**2).sum()))


def delta_h_exact(states: LayerStates, states_perturbed: LayerStates) -> DeviationReport:
    """Element-wise H' - H per layer/head, with Frobenius norms."""
    a, b = states.head_out, states_perturbed.head_out
    if a.shape != b.shape:
        raise ShapeError(f"state shapes differ: {a.shape} vs {b.shape}")
    diff = b - a
    norms = np.sqrt((diff**2).sum(axis=(-1, -2)))
    return DeviationReport(delta_h_exact=diff, norm_exact=norms)


def _check_qk(q: np.ndarray, k: np.ndarray):
    if q.shape != k.shape:
        raise ShapeError(f"q {q.shape} and k {k.shape} differ")


def delta_h_first_order(q, k, v, perturbation: Perturbation,
                        causal: bool = True) -> np.ndarray:
    """First-order deviation (dA/dK contraction) + A * delta_v.

    The V direction is exact in A (output is linear in V).  The K
    direction applies the softmax differential row by row: with
    dZ = q delta_k^T / sqrt(d_k) and A the (masked) attention matrix,
    dA = A * (dZ - rowsum(A * dZ)), and the K contribution is dA v.
    Accepts a leading head axis.
    """
    q, k, v = np.asarray(q, float), np.asarray(k, float), np.asarray(v, float)
    _check_qk(q, k)
    if perturbation.delta_k.shape != k.shape or perturbation.delta_v.shape != v.shape:
        raise ShapeError("perturbation shape does not match k/v")
    d_k = q.shape[-1]
    attn = softmax_rows(q @ np.swapaxes(k, -1, -2) / math.sqrt(d_k), causal=causal)
    dz = q @ np.swapaxes(perturbation.delta_k, -1, -2) / math.sqrt(d_k)
    weighted = attn * dz
    d_attn = weighted - attn * weighted.sum(axis=-1, keepdims=True)
    return d_attn @ v + attn @ perturbation.delta_v


def v_impact_scores(q, k, delta_v, causal: bool = True) -> np.ndarray:
    """Per-token score: cumulative attention mass times value deviation.

    score_i = colsum(A)_i * ||delta_v_i||_1.  With a leading head axis the
    attention mass is averaged over heads and the L1 norm runs over the
    concatenation of the token's rows across heads.
    """
    q, k = np.asarray(q, float), np.asarray(k, float)
    delta_v = np.asarray(delta_v, float)
    _check_qk(q, k)
    if delta_v.shape != k.shape:
        raise ShapeError(f"delta_v {delta_v.shape} does not match k {k.shape}")
    d_k = q.shape[-1]
    attn = softmax_rows(q @ np.swapaxes(k, -1, -2) / math.sqrt(d_k), causal=causal)
    alpha = attn.sum(axis=-2)
    dv_l1 = np.abs(delta_v).sum(axis=-1)
    if attn.ndim == 3:
        alpha = alpha.mean(axis=0)
        dv_l1 = dv_l1.sum(axis=0)
    return alpha * dv_l1


def k_impact_scores(q, k, v, delta_k, causal: bool = True) -> np.ndarray:
    """Per-token norm of the first-order deviation its delta_k row causes.

    Zeroing every delta_k row except row i leaves a rank-one attention
    differential, so its contribution collapses to
    dH^(i)_j = dZ_{j,i} A_{j,i} (v_i - (A v)_j); the score is that
    matrix's Frobenius norm (summed over heads when stacked).
    """
    q, k, v = np.asarray(q, float), np.asarray(k, float), np.asarray(v, float)
    delta_k = np.asarray(delta_k, float)
    _check_qk(q, k)
    if delta_k.shape != k.shape:
        raise ShapeError(f"delta_k {delta_k.shape} does not match k {k.shape}")
    d_k = q.shape[-1]
    attn = softmax_rows(q @ np.swapaxes(k, -1, -2) / math.sqrt(d_k), causal=causal)
    dz = q @ np.swapaxes(delta_k, -1, -2) / math.sqrt(d_k)
    out = attn @ v
    # coeff[..., j, i] = dZ_{j,i} A_{j,i}; gap[..., j, i] = ||v_i - out_j||^2
    coeff = (attn * dz) ** 2
    v_sq = (v**2).sum(axis=-1)
    out_sq = (out**2).sum(axis=-1)
    cross = out @ np.swapaxes(v, -1, -2)
    gap = out_sq[..., :, None] + v_sq[..., None, :] - 2.0 * cross
    per_token = (coeff * np.maximum(gap, 0.0)).sum(axis=-2)
    if per_token.ndim == 2:
        per_token = per_token.sum(axis=0)
    return np.sqrt(per_token)


def top_indices(scores, ratio: float) -> set[int]:
    """Indices of the top ceil(ratio * n) scores, ties to the lower index."""
    scores = np.asarray(scores, float)
    n = scores.shape[0]
    if not 0.0 < ratio <= 1.0:
        raise ParameterError(f"ratio must lie in (0, 1], got {ratio}")
    count = min(math.ceil(ratio * n), n)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    return set(order[:count])


def impact_overlap(a, b, ratio: float) -> float:
    """Jaccard similarity of the two score vectors' top-ratio index sets."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"score vectors differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ParameterError("score vectors are empty")
    top_a = top_indices(a, ratio)
    top_b = top_indices(b, ratio)
    union = top_a | top_b
    return len(top_a & top_b) / len(union)


def layer_retention(selections) -> list[float]:
    """Fraction of the first layer's selection that survives at each later layer."""
    sets = [set(s) for s in selections]
    if not sets or not sets[0]:
        raise ParameterError("first-layer selection must be non-empty")
    base = sets[0]
    return [len(base & s) / len(base) for s in sets[1:]]
