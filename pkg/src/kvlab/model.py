"""Deterministic toy multi-layer multi-head attention model.

Supplies the Q, K, V, attention, and output tensors every other module
consumes.  Layers are attention-only with a residual connection and no
positional encoding, so differences between cached and fresh K/V arise
purely from prefix-context differences.  All state is float64; weights
come from a counter-based generator (Philox) so that rebuilding from the
same (seed, config) is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping

import numpy as np

from kvlab.errors import CacheError, ConfigError, InputError, NumericError, ShapeError

if TYPE_CHECKING:
    from kvlab.pool import ReuseMap


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    d_model: int = 64
    vocab_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "d_model", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.num_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by num_heads={self.num_heads}"
            )

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads


@dataclass(frozen=True)
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray


class ToyModel:
    """Embedding plus per-layer projection matrices, all seeded."""

    def __init__(self, config: ModelConfig):
        self.config = config
        gen = np.random.Generator(np.random.Philox(key=config.seed))
        scale = 1.0 / np.sqrt(config.d_model)

        def draw(rows: int, cols: int) -> np.ndarray:
            return gen.uniform(-1.0, 1.0, size=(rows, cols)) * scale

        d = config.d_model
        self.embedding = draw(config.vocab_size, d)
        self.layers = [
            LayerWeights(draw(d, d), draw(d, d), draw(d, d), draw(d, d))
            for _ in range(config.num_layers)
        ]

    def embed(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise InputError("token sequence must be a non-empty 1-D array")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise InputError(
                f"token id outside vocabulary [0, {self.config.vocab_size})"
            )
        return self.embedding[ids]


def init_model(config: ModelConfig) -> ToyModel:
    return ToyModel(config)


def split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    """(n, d_model) -> (num_heads, n, d_k)."""
    n, d_model = x.shape
    return x.reshape(n, num_heads, d_model // num_heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(num_heads, n, d_k) -> (n, d_model)."""
    h, n, d_k = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d_k)


def softmax_rows(logits: np.ndarray, causal: bool = False) -> np.ndarray:
    """Row softmax over the last axis, optionally causally masked."""
    if causal:
        n_q, n_k = logits.shape[-2], logits.shape[-1]
        mask = np.triu(np.ones((n_q, n_k), dtype=bool), k=1)
        logits = np.where(mask, -np.inf, logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                      causal: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention; returns (output, attention matrix).

    output = row-softmax(q k^T / sqrt(d_k)) v, with an optional causal
    mask.  Accepts a leading head axis via broadcasting.
    """
    q, k, v = np.asarray(q, float), np.asarray(k, float), np.asarray(v, float)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"q/k width mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    if q.shape[-2] != k.shape[-2] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"row counts differ: q {q.shape[-2]}, k {k.shape[-2]}, v {v.shape[-2]}"
        )
    for name, x in (("q", q), ("k", k), ("v", v)):
        if not np.isfinite(x).all():
            raise NumericError(f"{name} contains non-finite values")
    d_k = q.shape[-1]
    attn = softmax_rows(q @ np.swapaxes(k, -1, -2) / np.sqrt(d_k), causal=causal)
    return attn @ v, attn


@dataclass
class LayerStates:
    """Everything a forward pass produced, stacked per layer and head.

    q, k, v, head_out: (num_layers, num_heads, n, d_k)
    attn:              (num_layers, num_heads, n, n)
    hidden:            (num_layers + 1, n, d_model); hidden[0] is the
                       embedding, hidden[l + 1] feeds layer l + 1.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    head_out: np.ndarray
    hidden: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.hidden.shape[1]


def _normalize_recompute(recompute, num_layers: int) -> list[set[int]]:
    if recompute is None:
        return [set() for _ in range(num_layers)]
    if isinstance(recompute, Mapping):
        return [set(recompute.get(layer, ())) for layer in range(num_layers)]
    fixed = set(recompute)
    return [set(fixed) for _ in range(num_layers)]


def _forward(tokens, model: ToyModel, reuse: "ReuseMap | None",
             recompute: list[set[int]]) -> LayerStates:
    cfg = model.config
    x = model.embed(tokens)
    n = x.shape[0]

    sources = {} if reuse is None else reuse.sources
    for pos, (entry, cand_pos) in sources.items():
        if not 0 <= pos < n:
            raise InputError(f"reuse position {pos} outside request of length {n}")
        if entry.k.shape[0] != cfg.num_layers or entry.k.shape[1] != cfg.num_heads \
                or entry.k.shape[3] != cfg.d_k:
            raise CacheError(
                f"cached entry dims {entry.k.shape[:2] + entry.k.shape[3:]} "
                f"incompatible with model ({cfg.num_layers}, {cfg.num_heads}, {cfg.d_k})"
            )
        if not 0 <= cand_pos < entry.k.shape[2]:
            raise CacheError(f"cached position {cand_pos} outside entry")

    L, H = cfg.num_layers, cfg.num_heads
    q_all = np.empty((L, H, n, cfg.d_k))
    k_all = np.empty_like(q_all)
    v_all = np.empty_like(q_all)
    attn_all = np.empty((L, H, n, n))
    out_all = np.empty_like(q_all)
    hidden_all = np.empty((L + 1, n, cfg.d_model))
    hidden_all[0] = x

    for layer in range(L):
        w = model.layers[layer]
        q = split_heads(x @ w.w_q, H)
        k = split_heads(x @ w.w_k, H)
        v = split_heads(x @ w.w_v, H)
        for pos, (entry, cand_pos) in sources.items():
            if pos in recompute[layer]:
                continue
            k[:, pos, :] = entry.k[layer, :, cand_pos, :]
            v[:, pos, :] = entry.v[layer, :, cand_pos, :]
        head_out, attn = attention_forward(q, k, v, causal=True)
        x = x + merge_heads(head_out) @ w.w_o

        q_all[layer], k_all[layer], v_all[layer] = q, k, v
        attn_all[layer], out_all[layer] = attn, head_out
        hidden_all[layer + 1] = x

    return LayerStates(q_all, k_all, v_all, attn_all, out_all, hidden_all)


def model_forward(tokens, model: ToyModel) -> LayerStates:
    """Full fresh forward pass over the token sequence."""
    return _forward(tokens, model, None, _normalize_recompute(None, model.config.num_layers))


def model_forward_with_reuse(tokens, model: ToyModel, reuse: "ReuseMap | None",
                             recompute=None) -> LayerStates:
    """Forward pass with cached K/V substituted at reused positions.

    At every layer, positions present in ``reuse`` and not listed in
    ``recompute`` take their K/V rows verbatim from the cache; all other
    rows (and all queries) are computed fresh from the states flowing
    through this pass.  ``recompute`` may be a per-layer mapping or a
    single index set applied to every layer.
    """
    sets = _normalize_recompute(recompute, model.config.num_layers)
    return _forward(tokens, model, reuse, sets)
