"""Token-sequence matching with a polynomial rolling hash.

Two matchers are provided:

* :func:`match_sequences`: adaptive matcher, where every window hash hit is
  verified token-by-token and extended past the window end, so reusable
  spans of arbitrary length and alignment are found.
* :func:`fixed_chunk_match`: baseline matcher that only accepts whole
  chunk-aligned blocks, the behavior adaptive matching is measured
  against.

The hot kernel is implemented twice: a compiled extension
(``kvlab._matchcore``, Cython) and a pure-Python fallback
(``kvlab._matchpure``).  The backend is chosen at import time; set
``KVLAB_MATCH_BACKEND=pure`` to force the fallback.  Both backends produce
identical results; the arithmetic is integer-exact either way.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from kvlab import _matchpure
from kvlab.errors import ParameterError

try:
    from kvlab import _matchcore
except ImportError:
    _matchcore = None

#: Name of the kernel selected at import ("compiled" or "pure").
BACKEND = "pure"
if _matchcore is not None and os.environ.get("KVLAB_MATCH_BACKEND") != "pure":
    BACKEND = "compiled"

# The compiled kernel does 64-bit modular arithmetic; residue products must
# stay below 2**62, so any larger modulus is routed to the pure backend.
_COMPILED_MAX_MODULUS = 2**31


def _is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, exact for all 64-bit integers."""
    if n < 2:
        return False
    for p in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % p == 0:
            return n == p
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class HashParams:
    """Rolling-hash parameters: window size, base, and prime modulus."""

    window_size: int = 8
    base: int = 31
    modulus: int = 1_000_000_007

    def __post_init__(self):
        if self.window_size < 1:
            raise ParameterError(f"window_size must be >= 1, got {self.window_size}")
        if self.base < 2:
            raise ParameterError(f"base must be >= 2, got {self.base}")
        if self.modulus <= self.base:
            raise ParameterError("modulus must exceed base")
        if not _is_prime(self.modulus):
            raise ParameterError(f"modulus {self.modulus} is not prime")


@dataclass
class MatchResult:
    """Paired matched positions; target positions are unique."""

    target_matches: list[int] = field(default_factory=list)
    candidate_matches: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.target_matches)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.target_matches, self.candidate_matches))


def _as_tokens(tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim != 1:
        raise ParameterError("token sequence must be one-dimensional")
    if arr.size and arr.min() < 0:
        raise ParameterError("token ids must be non-negative")
    return arr


def _kernel(params: HashParams):
    if BACKEND == "compiled" and params.modulus < _COMPILED_MAX_MODULUS:
        return _matchcore
    return _matchpure


def rolling_hash(tokens, start: int, params: HashParams | None = None) -> int:
    """Polynomial hash of the window beginning at ``start``.

    H = (t_0 * b^(w-1) + t_1 * b^(w-2) + ... + t_{w-1} * b^0) mod m
    over the window tokens.  Raises if the window overruns the sequence.
    """
    params = params or HashParams()
    arr = _as_tokens(tokens)
    w, b, m = params.window_size, params.base, params.modulus
    if start < 0 or start + w > arr.size:
        raise ParameterError(
            f"window [{start}, {start + w}) exceeds sequence of length {arr.size}"
        )
    h = 0
    for t in arr[start : start + w]:
        h = (h * b + int(t) % m) % m
    return h


def window_hashes(tokens, params: HashParams | None = None) -> np.ndarray:
    """Hashes of every window start, computed with the O(1) rolling update."""
    params = params or HashParams()
    arr = _as_tokens(tokens)
    out = _kernel(params).window_hashes(
        arr, params.window_size, params.base, params.modulus
    )
    return np.asarray(out, dtype=np.uint64)


def build_hash_index(tokens, params: HashParams | None = None) -> dict[int, list[int]]:
    """Map window hash -> ascending list of window start positions."""
    params = params or HashParams()
    index: dict[int, list[int]] = {}
    for i, h in enumerate(window_hashes(tokens, params)):
        index.setdefault(int(h), []).append(i)
    return index


def match_sequences(target, candidate, params: HashParams | None = None) -> MatchResult:
    """Adaptive matcher: index the target, probe candidate windows, extend.

    Every hash hit is verified by token equality before anything is
    recorded, and verified runs are extended one token at a time past the
    window end.  Target positions already claimed are skipped but do not
    stop the extension.
    """
    params = params or HashParams()
    t_arr = _as_tokens(target)
    c_arr = _as_tokens(candidate)
    tm, cm = _kernel(params).match_pairs(
        t_arr, c_arr, params.window_size, params.base, params.modulus
    )
    return MatchResult([int(i) for i in tm], [int(j) for j in cm])


def fixed_chunk_match(target, candidate, chunk_size: int) -> MatchResult:
    """Baseline matcher: whole chunk-aligned blocks only, no extension.

    A target chunk (positions [i*c, (i+1)*c)) matches only if the identical
    block occurs at some chunk-aligned offset of the candidate.  Trailing
    partial chunks never match.
    """
    if chunk_size < 1:
        raise ParameterError(f"chunk_size must be >= 1, got {chunk_size}")
    t_arr = _as_tokens(target)
    c_arr = _as_tokens(candidate)
    c = chunk_size
    result = MatchResult()
    cand_chunks = [
        (j, c_arr[j : j + c]) for j in range(0, c_arr.size - c + 1, c)
    ]
    for i in range(0, t_arr.size - c + 1, c):
        block = t_arr[i : i + c]
        for j, cand in cand_chunks:
            if np.array_equal(block, cand):
                result.target_matches.extend(range(i, i + c))
                result.candidate_matches.extend(range(j, j + c))
                break
    return result


def hit_rate(tokens, matched_positions) -> float:
    """Fraction of the request's positions covered by matches (0 for empty)."""
    arr = _as_tokens(tokens)
    if arr.size == 0:
        return 0.0
    positions = set(int(p) for p in matched_positions)
    if positions and (min(positions) < 0 or max(positions) >= arr.size):
        raise ParameterError("matched position outside the request")
    return len(positions) / arr.size
