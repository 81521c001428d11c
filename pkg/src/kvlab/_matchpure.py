"""Pure-Python matching kernels.

Reference implementation of the polynomial rolling hash and the
adaptive-extension matcher.  The compiled kernel in ``_matchcore`` mirrors
these semantics bit for bit (integer arithmetic only); this module is the
fallback selected when the extension is not built, and the only backend
used when the modulus does not fit the compiled kernel's 64-bit overflow
discipline.
"""

from __future__ import annotations


def window_hashes(tokens, w: int, b: int, m: int) -> list[int]:
    """Hash every length-w window, reusing the previous window's value.

    H(i) = (t_i * b^(w-1) + t_{i+1} * b^(w-2) + ... + t_{i+w-1}) mod m
    """
    n = len(tokens)
    if n < w:
        return []
    bw = pow(b, w - 1, m)
    h = 0
    for i in range(w):
        h = (h * b + tokens[i] % m) % m
    out = [h]
    for i in range(1, n - w + 1):
        h = ((h - (tokens[i - 1] % m) * bw) * b + tokens[i + w - 1] % m) % m
        out.append(h)
    return out


def match_pairs(target, candidate, w: int, b: int, m: int):
    """Adaptive matching: hash hits seed matches, equality extends them.

    Returns (target_matches, candidate_matches).  A target position is
    claimed at most once (first hit wins); candidate positions may back
    several target matches.  Buckets are walked in ascending target order
    so results do not depend on hash-map iteration order.
    """
    n_t, n_c = len(target), len(candidate)
    target_matches: list[int] = []
    candidate_matches: list[int] = []
    if n_t < w or n_c < w:
        return target_matches, candidate_matches

    index: dict[int, list[int]] = {}
    for i, h in enumerate(window_hashes(target, w, b, m)):
        index.setdefault(h, []).append(i)

    matched = bytearray(n_t)
    for j, h in enumerate(window_hashes(candidate, w, b, m)):
        for i in index.get(h, ()):
            k = 0
            while i + k < n_t and j + k < n_c and target[i + k] == candidate[j + k]:
                if not matched[i + k]:
                    matched[i + k] = 1
                    target_matches.append(i + k)
                    candidate_matches.append(j + k)
                k += 1
    return target_matches, candidate_matches
