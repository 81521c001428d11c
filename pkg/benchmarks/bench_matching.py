"""Head-to-head benchmark of the compiled and pure matching kernels.

Runs the same workloads through kvlab._matchcore (Cython, if built) and
kvlab._matchpure, checks the outputs agree, and prints a timing table.

Usage:
    python benchmarks/bench_matching.py [--repeats 5]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from kvlab import _matchpure  # noqa: E402

try:
    from kvlab import _matchcore
except ImportError:
    _matchcore = None

BASE, MOD = 31, 1_000_000_007


def workloads(rng):
    random_pairs = [
        (rng.integers(0, 16, 512).tolist(), rng.integers(0, 16, 512).tolist())
        for _ in range(40)
    ]
    shared = rng.integers(0, 4096, 256).tolist()
    overlapping_pairs = []
    for _ in range(40):
        prefix = rng.integers(0, 4096, 64).tolist()
        overlapping_pairs.append((prefix + shared, shared))
    adversarial = [([7] * 384, [7] * 384) for _ in range(4)]
    return {
        "random 512x512, alphabet 16": (random_pairs, 8),
        "shared 256-chunk overlap": (overlapping_pairs, 8),
        "adversarial all-equal 384": (adversarial, 8),
    }


def run(kernel, pairs, w, to_array):
    out = []
    for target, candidate in pairs:
        out.append(kernel.match_pairs(to_array(target), to_array(candidate),
                                      w, BASE, MOD))
    return out


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(42)
    suites = workloads(rng)

    def as_i64(tokens):
        return np.asarray(tokens, dtype=np.int64)

    print(f"{'workload':<32} {'pure':>10} {'compiled':>10} {'speedup':>8}")
    for name, (pairs, w) in suites.items():
        pure_times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            pure_out = run(_matchpure, pairs, w, list)
            pure_times.append(time.perf_counter() - t0)
        pure_best = min(pure_times)
        if _matchcore is None:
            print(f"{name:<32} {pure_best*1e3:>8.1f}ms {'n/a':>10} {'n/a':>8}")
            continue
        fast_times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            fast_out = run(_matchcore, pairs, w, as_i64)
            fast_times.append(time.perf_counter() - t0)
        fast_best = min(fast_times)
        for (pt, pc), (ft, fc) in zip(pure_out, fast_out):
            assert list(pt) == [int(i) for i in ft], "kernels disagree"
            assert list(pc) == [int(i) for i in fc], "kernels disagree"
        print(f"{name:<32} {pure_best*1e3:>8.1f}ms {fast_best*1e3:>8.1f}ms "
              f"{pure_best/fast_best:>7.1f}x")
    if _matchcore is None:
        print("\ncompiled kernel not built; run `python setup.py build_ext "
              "--inplace` or `pip install -e .`")
    return 0


if __name__ == "__main__":
    sys.exit(main())
