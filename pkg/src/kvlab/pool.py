"""Multi-request KV-cache pool.

Stores prior requests' per-layer K/V tensors keyed by token content,
serves reuse maps for new requests via the adaptive matcher, persists to a
little-endian binary format, and evicts least-recently-used entries under
a byte budget.

On-disk layout (all little-endian):

    magic "KVSH" | version u32=1 | entry_count u64
    per entry:
        id_len u32 | id utf-8 | token_count u32 | tokens u32[]
        num_layers u32 | num_heads u32 | d_k u32
        K f32 [layer][token][head][dim] | V f32 same order

Values are stored as 32-bit floats and widened back to 64-bit on load, so
a save/load/save round trip is byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from kvlab.errors import CacheError, FormatError, ParameterError
from kvlab.matching import HashParams, fixed_chunk_match, match_sequences, window_hashes
from kvlab.model import ModelConfig

_MAGIC = b"KVSH"
_VERSION = 1


@dataclass
class KVEntry:
    """One cached request: tokens plus per-layer, per-head K and V."""

    request_id: str
    tokens: np.ndarray            # (n,) int64
    k: np.ndarray                 # (num_layers, num_heads, n, d_k) float64
    v: np.ndarray
    last_access: int = 0
    insert_seq: int = 0
    window_hash_set: frozenset = frozenset()

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.size)

    @property
    def size_bytes(self) -> int:
        """Serialized size: id, tokens, dims, and both f32 tensors."""
        return (4 + len(self.request_id.encode()) + 4 + 4 * self.n_tokens
                + 12 + 2 * 4 * self.k.size)


@dataclass
class ReuseMap:
    """Alignment of a request's positions onto cached K/V rows."""

    length: int
    sources: dict[int, tuple[KVEntry, int]] = field(default_factory=dict)

    @property
    def hit_rate(self) -> float:
        return len(self.sources) / self.length if self.length else 0.0

    def validate(self, tokens) -> None:
        tokens = np.asarray(tokens, dtype=np.int64)
        for pos, (entry, cand_pos) in self.sources.items():
            if tokens[pos] != entry.tokens[cand_pos]:
                raise CacheError(
                    f"reuse map position {pos} maps to a different token"
                )


class CachePool:
    """KV entries indexed by content; most-recent insertion wins conflicts."""

    def __init__(self, config: ModelConfig, params: HashParams | None = None,
                 capacity_bytes: int | None = None):
        self.config = config
        self.params = params or HashParams()
        self.capacity_bytes = capacity_bytes
        self.entries: dict[str, KVEntry] = {}
        self._counter = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def total_bytes(self) -> int:
        return sum(e.size_bytes for e in self.entries.values())

    def _tick(self) -> int:
        self._counter += 1
        return self._counter

    def insert(self, request_id: str, tokens, k: np.ndarray, v: np.ndarray) -> None:
        """Store an entry; replaces any entry with the same id."""
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        k = np.asarray(k, float)
        v = np.asarray(v, float)
        expected = (cfg.num_layers, cfg.num_heads, tokens.size, cfg.d_k)
        if tokens.ndim != 1 or tokens.size == 0:
            raise CacheError("entry tokens must be a non-empty 1-D sequence")
        if tokens.min() < 0 or tokens.max() >= 2**32:
            raise CacheError("token ids must fit an unsigned 32-bit integer")
        if k.shape != expected or v.shape != expected:
            raise CacheError(
                f"K/V shape {k.shape} does not match pool config {expected}"
            )
        self.entries.pop(request_id, None)
        seq = self._tick()
        hashes = frozenset(int(h) for h in window_hashes(tokens, self.params))
        self.entries[request_id] = KVEntry(
            request_id, tokens.copy(), k.copy(), v.copy(),
            last_access=seq, insert_seq=seq, window_hash_set=hashes,
        )
        if self.capacity_bytes is not None:
            self.evict_to_capacity(self.capacity_bytes)

    def lookup(self, tokens, fixed_chunk: int | None = None) -> ReuseMap:
        """Match the request against stored entries, most recent first.

        Each request position maps to at most one cached row; when several
        entries cover a position the most recently inserted one wins.
        ``fixed_chunk`` switches to the chunk-aligned baseline matcher.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        reuse = ReuseMap(length=int(tokens.size))
        if tokens.size == 0 or not self.entries:
            return reuse
        target_hashes = None
        if fixed_chunk is None:
            target_hashes = frozenset(int(h) for h in window_hashes(tokens, self.params))
        ordered = sorted(self.entries.values(), key=lambda e: -e.insert_seq)
        contributors = []
        for entry in ordered:
            if len(reuse.sources) == reuse.length:
                break
            if fixed_chunk is None:
                if not (target_hashes & entry.window_hash_set):
                    continue
                result = match_sequences(tokens, entry.tokens, self.params)
            else:
                result = fixed_chunk_match(tokens, entry.tokens, fixed_chunk)
            contributed = False
            for t_pos, c_pos in zip(result.target_matches, result.candidate_matches):
                if t_pos not in reuse.sources:
                    reuse.sources[t_pos] = (entry, c_pos)
                    contributed = True
            if contributed:
                contributors.append(entry)
        # refresh contributors' recency, preserving their relative order
        for entry in sorted(contributors, key=lambda e: e.last_access):
            entry.last_access = self._tick()
        reuse.sources = dict(sorted(reuse.sources.items()))
        return reuse

    def evict_to_capacity(self, max_bytes: int) -> list[str]:
        """Drop least-recently-accessed entries until the pool fits."""
        if max_bytes < 0:
            raise ParameterError(f"max_bytes must be >= 0, got {max_bytes}")
        evicted: list[str] = []
        while self.entries and self.total_bytes > max_bytes:
            victim = min(self.entries.values(), key=lambda e: e.last_access)
            del self.entries[victim.request_id]
            evicted.append(victim.request_id)
        return evicted

    def save(self, path) -> None:
        cfg = self.config
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", _VERSION))
            fh.write(struct.pack("<Q", len(self.entries)))
            for entry in self.entries.values():
                ident = entry.request_id.encode()
                fh.write(struct.pack("<I", len(ident)))
                fh.write(ident)
                fh.write(struct.pack("<I", entry.n_tokens))
                fh.write(entry.tokens.astype("<u4").tobytes())
                fh.write(struct.pack("<III", cfg.num_layers, cfg.num_heads, cfg.d_k))
                for tensor in (entry.k, entry.v):
                    # memory order (L, H, n, d_k) -> file order (L, n, H, d_k)
                    fh.write(np.ascontiguousarray(
                        tensor.transpose(0, 2, 1, 3)).astype("<f4").tobytes())

    def load(self, path) -> "CachePool":
        """Replace the pool contents from a file written by :meth:`save`."""
        with open(path, "rb") as fh:
            data = fh.read()
        off = 0

        def take(n: int, what: str) -> bytes:
            nonlocal off
            if off + n > len(data):
                raise FormatError(f"truncated while reading {what}", off)
            chunk = data[off:off + n]
            off += n
            return chunk

        if take(4, "magic") != _MAGIC:
            raise FormatError("bad magic bytes", 0)
        (version,) = struct.unpack("<I", take(4, "version"))
        if version != _VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        (count,) = struct.unpack("<Q", take(8, "entry count"))
        entries: dict[str, KVEntry] = {}
        cfg = self.config
        for _ in range(count):
            (id_len,) = struct.unpack("<I", take(4, "id length"))
            ident = take(id_len, "id").decode()
            (n_tok,) = struct.unpack("<I", take(4, "token count"))
            tokens = np.frombuffer(take(4 * n_tok, "tokens"), dtype="<u4").astype(np.int64)
            layers, heads, d_k = struct.unpack("<III", take(12, "dimensions"))
            if (layers, heads, d_k) != (cfg.num_layers, cfg.num_heads, cfg.d_k):
                raise CacheError(
                    f"entry {ident!r} dims ({layers}, {heads}, {d_k}) do not match "
                    f"pool config ({cfg.num_layers}, {cfg.num_heads}, {cfg.d_k})"
                )
            size = layers * n_tok * heads * d_k
            tensors = []
            for what in ("K", "V"):
                raw = np.frombuffer(take(4 * size, what), dtype="<f4")
                tensors.append(raw.reshape(layers, n_tok, heads, d_k)
                               .transpose(0, 2, 1, 3).astype(np.float64))
            seq = self._tick()
            entries[ident] = KVEntry(
                ident, tokens, tensors[0], tensors[1],
                last_access=seq, insert_seq=seq,
                window_hash_set=frozenset(
                    int(h) for h in window_hashes(tokens, self.params)),
            )
        if off != len(data):
            raise FormatError("trailing data after final entry", off)
        self.entries = entries
        return self
