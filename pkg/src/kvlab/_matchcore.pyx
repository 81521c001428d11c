# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled matching kernels.

Same contract as ``_matchpure``; all hash arithmetic is carried out in
unsigned 64-bit registers, which is exact because callers guarantee
m < 2**31 (so every product of residues stays below 2**62).
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def window_hashes(cnp.int64_t[::1] tokens, int w, unsigned long long b,
                  unsigned long long m):
    cdef Py_ssize_t n = tokens.shape[0]
    if n < w:
        return np.empty(0, dtype=np.uint64)
    out = np.empty(n - w + 1, dtype=np.uint64)
    cdef unsigned long long[::1] ov = out
    cdef unsigned long long h = 0, bw = 1, drop
    cdef Py_ssize_t i
    for i in range(w - 1):
        bw = (bw * b) % m
    for i in range(w):
        h = (h * b + (<unsigned long long> tokens[i]) % m) % m
    ov[0] = h
    for i in range(1, n - w + 1):
        drop = ((<unsigned long long> tokens[i - 1]) % m) * bw % m
        h = ((h + m - drop) % m * b + (<unsigned long long> tokens[i + w - 1]) % m) % m
        ov[i] = h
    return out


def match_pairs(cnp.int64_t[::1] target, cnp.int64_t[::1] candidate, int w,
                unsigned long long b, unsigned long long m):
    cdef Py_ssize_t n_t = target.shape[0]
    cdef Py_ssize_t n_c = candidate.shape[0]
    target_matches = []
    candidate_matches = []
    if n_t < w or n_c < w:
        return target_matches, candidate_matches

    th_arr = window_hashes(target, w, b, m)
    ch_arr = window_hashes(candidate, w, b, m)
    # Stable sort keeps bucket positions ascending, matching the pure
    # backend's dict-of-ascending-lists traversal order.
    order_arr = np.argsort(th_arr, kind="stable").astype(np.int64)
    th_sorted_arr = np.ascontiguousarray(th_arr[order_arr])

    cdef unsigned long long[::1] th_sorted = th_sorted_arr
    cdef cnp.int64_t[::1] order = order_arr
    cdef unsigned long long[::1] ch = ch_arr
    matched_arr = np.zeros(n_t, dtype=np.uint8)
    cdef unsigned char[::1] matched = matched_arr

    cdef Py_ssize_t n_th = th_sorted.shape[0]
    cdef Py_ssize_t j, lo, hi, mid, pos, i, k
    cdef unsigned long long h
    for j in range(ch.shape[0]):
        h = ch[j]
        # lower bound
        lo = 0
        hi = n_th
        while lo < hi:
            mid = (lo + hi) >> 1
            if th_sorted[mid] < h:
                lo = mid + 1
            else:
                hi = mid
        pos = lo
        while pos < n_th and th_sorted[pos] == h:
            i = order[pos]
            k = 0
            while i + k < n_t and j + k < n_c and target[i + k] == candidate[j + k]:
                if not matched[i + k]:
                    matched[i + k] = 1
                    target_matches.append(i + k)
                    candidate_matches.append(j + k)
                k += 1
            pos += 1
    return target_matches, candidate_matches
