"""Independent reference implementations the tests measure against.

Everything here is written straight-line, without reusing the production
kernels: hashes are evaluated from the polynomial definition, matching
scans every window pair, and the LRU is a plain ordered dict.
"""

from __future__ import annotations

from collections import OrderedDict


def polynomial_hash(tokens, start: int, w: int, b: int, m: int) -> int:
    """Direct evaluation of t_0*b^(w-1) + ... + t_{w-1} mod m."""
    value = 0
    for offset in range(w):
        value += (tokens[start + offset] % m) * pow(b, w - 1 - offset, m)
    return value % m


def naive_match(target, candidate, w: int, b: int, m: int):
    """Quadratic scan with the same extension and first-match-wins rules.

    For every candidate window, every target window with an equal hash is
    tried (ascending), each hit extended token by token, and target
    positions are claimed at most once.  No index, no rolling update.
    """
    n_t, n_c = len(target), len(candidate)
    target_matches: list[int] = []
    candidate_matches: list[int] = []
    if n_t < w or n_c < w:
        return target_matches, candidate_matches
    target_hashes = [polynomial_hash(target, i, w, b, m) for i in range(n_t - w + 1)]
    matched: set[int] = set()
    for j in range(n_c - w + 1):
        h = polynomial_hash(candidate, j, w, b, m)
        for i in range(n_t - w + 1):
            if target_hashes[i] != h:
                continue
            k = 0
            while i + k < n_t and j + k < n_c and target[i + k] == candidate[j + k]:
                if (i + k) not in matched:
                    matched.add(i + k)
                    target_matches.append(i + k)
                    candidate_matches.append(j + k)
                k += 1
    return target_matches, candidate_matches


class ReferenceLRU:
    """Ordered-dict LRU keyed by id, tracking per-entry byte sizes."""

    def __init__(self, capacity_bytes=None):
        self.capacity = capacity_bytes
        self.items: OrderedDict[str, int] = OrderedDict()

    def insert(self, key: str, size: int) -> list[str]:
        self.items.pop(key, None)
        self.items[key] = size
        return self.evict() if self.capacity is not None else []

    def touch(self, key: str) -> None:
        self.items.move_to_end(key)

    def evict(self, capacity=None) -> list[str]:
        cap = self.capacity if capacity is None else capacity
        out = []
        while self.items and sum(self.items.values()) > cap:
            key, _ = self.items.popitem(last=False)
            out.append(key)
        return out

    def keys(self) -> list[str]:
        return list(self.items)
