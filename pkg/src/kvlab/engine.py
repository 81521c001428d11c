"""Incremental forward engine over a growing sequence with cached-KV reuse.

A :class:`ReuseSession` owns the mutable per-layer K/V cache of one
request: prefill fills it (optionally substituting cached rows and
recomputing a selected subset), decode appends one token per step, and
stale rows can be recomputed in place at any time so later steps read the
corrected values.  The prefill path shares the batch forward's arithmetic,
and an append-only session reproduces a full fresh forward (tested against
it), which is what makes the session usable as its own reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from kvlab.errors import InputError, ParameterError
from kvlab.model import (
    LayerStates,
    ToyModel,
    _normalize_recompute,
    attention_forward,
    merge_heads,
    model_forward_with_reuse,
    softmax_rows,
    split_heads,
)
from kvlab.selection import (
    SelectionConfig,
    SelectionMode,
    select_baseline,
    select_decode_step,
)


@dataclass
class StepStates:
    """Per-layer views of a single appended token."""

    q: np.ndarray            # (num_layers, num_heads, d_k)
    attn: list[np.ndarray]   # per layer: (num_heads, context_len)
    hidden_out: np.ndarray   # (d_model,) final-layer output row


class ReuseSession:
    """Mutable K/V cache of one request, supporting append and recompute."""

    def __init__(self, model: ToyModel, tokens, reuse=None, recompute=None,
                 _prefill_states: LayerStates | None = None):
        cfg = model.config
        self.model = model
        self.tokens = [int(t) for t in np.asarray(tokens, dtype=np.int64)]
        if isinstance(recompute, (list, tuple)) and \
                all(isinstance(s, (set, frozenset)) for s in recompute):
            sets = [set(s) for s in recompute]  # one set per layer
        else:
            sets = _normalize_recompute(recompute, cfg.num_layers)
        if _prefill_states is None:
            _prefill_states = model_forward_with_reuse(
                tokens, model, reuse, dict(enumerate(sets))
            )
        self.prefill_states = _prefill_states
        self.n_prefill = len(self.tokens)
        self.k = _prefill_states.k.copy()  # (L, H, n, d_k), grows along axis 2
        self.v = _prefill_states.v.copy()
        self.reused: set[int] = set() if reuse is None else set(reuse.sources)
        self.recomputed: list[set[int]] = [set(s) & self.reused for s in sets]
        # Layer-1 states are context-free here, so the shallowest layer where
        # reuse can deviate is the second one; that is where the practical
        # probe measures value deviation (exactly, since recomputing the
        # first layer in full is cheap and makes its outputs exact).
        self.probe_layer = 1 if cfg.num_layers >= 2 else 0
        self._probe_true_v: np.ndarray | None = None

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    def _probe_truth(self) -> np.ndarray:
        if self._probe_true_v is None:
            model = self.model
            x_probe = _exact_hidden_at(model, self.tokens[: self.n_prefill],
                                       self.probe_layer)
            self._probe_true_v = split_heads(
                x_probe @ model.layers[self.probe_layer].w_v,
                model.config.num_heads)
        return self._probe_true_v

    def _token_rows(self, token_id: int, context: int) -> StepStates:
        """Run one token through all layers attending to cache rows [0, context)."""
        model = self.model
        cfg = model.config
        h = model.embed([token_id])[0]
        q_rows = np.empty((cfg.num_layers, cfg.num_heads, cfg.d_k))
        attn_rows: list[np.ndarray] = []
        for layer, w in enumerate(model.layers):
            q = (h @ w.w_q).reshape(cfg.num_heads, cfg.d_k)
            k_new = (h @ w.w_k).reshape(cfg.num_heads, cfg.d_k)
            v_new = (h @ w.w_v).reshape(cfg.num_heads, cfg.d_k)
            self.k[layer, :, context - 1, :] = k_new
            self.v[layer, :, context - 1, :] = v_new
            keys = self.k[layer, :, :context, :]
            values = self.v[layer, :, :context, :]
            logits = np.einsum("hd,hnd->hn", q, keys) / math.sqrt(cfg.d_k)
            weights = softmax_rows(logits)
            out = np.einsum("hn,hnd->hd", weights, values)
            h = h + out.reshape(-1) @ w.w_o
            q_rows[layer] = q
            attn_rows.append(weights)
        return StepStates(q=q_rows, attn=attn_rows, hidden_out=h)

    def append(self, token_id: int) -> StepStates:
        """Extend the sequence by one token, growing the cache."""
        cfg = self.model.config
        pad = np.zeros((cfg.num_layers, cfg.num_heads, 1, cfg.d_k))
        self.k = np.concatenate([self.k, pad], axis=2)
        self.v = np.concatenate([self.v, pad], axis=2)
        self.tokens.append(int(token_id))
        return self._token_rows(int(token_id), self.n_tokens)

    def recompute_positions(self, positions) -> None:
        """Recompute K/V rows in place from the current cache context.

        Each position is re-run through the layers attending causally to
        the cache as it stands, so layer-1 rows become exact and deeper
        rows inherit whatever corrections the cache already carries.
        Only K/V are overwritten; past outputs and queries stay as
        produced.
        """
        for pos in sorted(set(int(p) for p in positions)):
            if not 0 <= pos < self.n_tokens:
                raise InputError(f"position {pos} outside sequence of {self.n_tokens}")
            self._token_rows(self.tokens[pos], pos + 1)
            if pos in self.reused:
                for layer_set in self.recomputed:
                    layer_set.add(pos)

    def delta_v_probe(self) -> np.ndarray:
        """Cache V at the probe layer minus its exact value, per head.

        Decode rows (appended after prefill) are fresh and report zero.
        """
        delta = np.zeros_like(self.v[self.probe_layer])
        n = self.n_prefill
        delta[:, :n, :] = self.v[self.probe_layer, :, :n, :] - self._probe_truth()
        return delta

    def query_rows_probe(self, token_id: int) -> np.ndarray:
        """Probe-layer query of a not-yet-appended token, (num_heads, d_k).

        Runs the token through the layers below the probe, attending to the
        current cache plus its own virtual row, without mutating anything.
        """
        model = self.model
        cfg = model.config
        h = model.embed([token_id])[0]
        for layer in range(self.probe_layer):
            w = model.layers[layer]
            q = (h @ w.w_q).reshape(cfg.num_heads, cfg.d_k)
            k_new = (h @ w.w_k).reshape(cfg.num_heads, 1, cfg.d_k)
            v_new = (h @ w.w_v).reshape(cfg.num_heads, 1, cfg.d_k)
            keys = np.concatenate([self.k[layer], k_new], axis=1)
            values = np.concatenate([self.v[layer], v_new], axis=1)
            logits = np.einsum("hd,hnd->hn", q, keys) / math.sqrt(cfg.d_k)
            weights = softmax_rows(logits)
            out = np.einsum("hn,hnd->hd", weights, values)
            h = h + out.reshape(-1) @ w.w_o
        w = model.layers[self.probe_layer]
        return (h @ w.w_q).reshape(cfg.num_heads, cfg.d_k)


@dataclass
class PrefillResult:
    session: ReuseSession
    recompute_sets: list[set[int]]
    selected: tuple[int, ...] = ()
    eligible: set[int] = field(default_factory=set)


def _exact_hidden_at(model: ToyModel, tokens, layer: int) -> np.ndarray:
    """Exact hidden sequence entering ``layer``, via a fresh partial forward."""
    cfg = model.config
    x = model.embed(tokens)
    for w in model.layers[:layer]:
        q = split_heads(x @ w.w_q, cfg.num_heads)
        k = split_heads(x @ w.w_k, cfg.num_heads)
        v = split_heads(x @ w.w_v, cfg.num_heads)
        out, _ = attention_forward(q, k, v, causal=True)
        x = x + merge_heads(out) @ w.w_o
    return x


def _perturbed_probe(model: ToyModel, tokens, reuse, probe: int):
    """Probe-layer q, exact k/v, and cache-substituted k/v."""
    cfg = model.config
    w = model.layers[probe]
    x = _exact_hidden_at(model, tokens, probe)
    q = split_heads(x @ w.w_q, cfg.num_heads)
    k_true = split_heads(x @ w.w_k, cfg.num_heads)
    v_true = split_heads(x @ w.w_v, cfg.num_heads)
    k_pert, v_pert = k_true.copy(), v_true.copy()
    for pos, (entry, cand_pos) in reuse.sources.items():
        k_pert[:, pos, :] = entry.k[probe, :, cand_pos, :]
        v_pert[:, pos, :] = entry.v[probe, :, cand_pos, :]
    return q, k_true, v_true, k_pert, v_pert


def _restrict_rows(delta: np.ndarray, keep: set[int]) -> np.ndarray:
    out = np.zeros_like(delta)
    idx = sorted(keep)
    out[:, idx, :] = delta[:, idx, :]
    return out


def prefill_with_selection(model: ToyModel, tokens, reuse,
                           config: SelectionConfig,
                           ref_states: LayerStates | None = None) -> PrefillResult:
    """Prefill a session, selecting and recomputing stale tokens.

    PRACTICAL mode measures value deviation at layer 1 only (layer-1 truth
    is context-free, so a full layer-1 recompute is cheap) and applies the
    resulting selection at every layer.  ORACLE mode measures true
    deviation per layer against a fresh reference pass and selects layer
    by layer while the forward runs.
    """
    reused = sorted(reuse.sources) if reuse is not None else []
    if not reused:
        session = ReuseSession(model, tokens, reuse)
        return PrefillResult(session, session.recomputed)

    if config.mode is SelectionMode.PRACTICAL:
        probe = 1 if model.config.num_layers >= 2 else 0
        qp, kt, vt, kp, vp = _perturbed_probe(model, tokens, reuse, probe)
        dk = _restrict_rows(kp - kt, set(reused))
        dv = _restrict_rows(vp - vt, set(reused))
        result = select_baseline(config.strategy, qp, kt, vt, dk, dv,
                                 reused, config)
        selected = result.indices
        session = ReuseSession(model, tokens, reuse, set(selected))
        eligible = set(reused) - set(selected)
        return PrefillResult(session, session.recomputed, selected, eligible)

    if ref_states is None:
        raise ParameterError("oracle-mode prefill needs reference layer states")
    cfg = model.config
    x = model.embed(tokens)
    n = x.shape[0]
    L, H = cfg.num_layers, cfg.num_heads
    q_all = np.empty((L, H, n, cfg.d_k))
    k_all, v_all = np.empty_like(q_all), np.empty_like(q_all)
    attn_all = np.empty((L, H, n, n))
    out_all = np.empty_like(q_all)
    hidden_all = np.empty((L + 1, n, cfg.d_model))
    hidden_all[0] = x
    sets: list[set[int]] = []
    reused_set = set(reused)
    for layer in range(L):
        w = model.layers[layer]
        q = split_heads(x @ w.w_q, H)
        k_fresh = split_heads(x @ w.w_k, H)
        v_fresh = split_heads(x @ w.w_v, H)
        k_pert, v_pert = k_fresh.copy(), v_fresh.copy()
        for pos, (entry, cand_pos) in reuse.sources.items():
            k_pert[:, pos, :] = entry.k[layer, :, cand_pos, :]
            v_pert[:, pos, :] = entry.v[layer, :, cand_pos, :]
        dk = _restrict_rows(k_pert - ref_states.k[layer], reused_set)
        dv = _restrict_rows(v_pert - ref_states.v[layer], reused_set)
        result = select_baseline(config.strategy, q, ref_states.k[layer],
                                 ref_states.v[layer], dk, dv, reused, config)
        for pos in result.indices:
            k_pert[:, pos, :] = k_fresh[:, pos, :]
            v_pert[:, pos, :] = v_fresh[:, pos, :]
        sets.append(set(result.indices))
        head_out, attn = attention_forward(q, k_pert, v_pert, causal=True)
        x = x + merge_heads(head_out) @ w.w_o
        q_all[layer], k_all[layer], v_all[layer] = q, k_pert, v_pert
        attn_all[layer], out_all[layer] = attn, head_out
        hidden_all[layer + 1] = x
    states = LayerStates(q_all, k_all, v_all, attn_all, out_all, hidden_all)
    session = ReuseSession(model, tokens, reuse, sets, _prefill_states=states)
    eligible = reused_set - set.intersection(*sets) if sets else set()
    return PrefillResult(session, session.recomputed,
                         tuple(sorted(set.union(*sets))), eligible)


@dataclass
class GenerationResult:
    step_deviation: list[float]
    recompute_counts: list[int]

    @property
    def cumulative_deviation(self) -> float:
        return float(sum(self.step_deviation))


def run_generation(session: ReuseSession, ref_session: ReuseSession,
                   decode_tokens, n_extra: int) -> GenerationResult:
    """Decode a scripted token stream, rescoring stale tokens each step.

    Selection is scored at the probe layer (where cache-vs-true deviation
    is known exactly) against the incoming token's query, and
    recomputation applies to every layer.  The per-step deviation is the
    Euclidean distance between the session's and the reference's
    final-layer output rows.
    """
    eligible = set(session.reused) - set.intersection(*session.recomputed) \
        if session.recomputed else set(session.reused)
    deviations: list[float] = []
    counts: list[int] = []
    for token in decode_tokens:
        token = int(token)
        chosen: tuple[int, ...] = ()
        if n_extra > 0 and eligible:
            q_t = session.query_rows_probe(token)
            result = select_decode_step(q_t, session.k[session.probe_layer],
                                        session.delta_v_probe(),
                                        eligible, n_extra)
            chosen = result.indices
            if chosen:
                session.recompute_positions(chosen)
                eligible -= set(chosen)
        step = session.append(token)
        ref_step = ref_session.append(token)
        deviations.append(float(np.linalg.norm(step.hidden_out - ref_step.hidden_out)))
        counts.append(len(chosen))
    return GenerationResult(deviations, counts)
