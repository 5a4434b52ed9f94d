"""Benchmark the numba-compiled scoring kernels against the numpy fallbacks.

Run from the repository root:

    python benchmarks/bench_kernels.py

The comparison always times both implementations regardless of the
TAILGRAPH_NO_NUMBA setting used at import (the numpy twins are exported
separately).
"""

import time

import numpy as np

from tailgraph import kernels


def _time(fn, *args, repeat=5, inner=20):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def main():
    rng = np.random.default_rng(0)
    if not kernels.NUMBA_ENABLED:
        print("numba path disabled or unavailable; timing numpy against itself")

    print(f"{'kernel':<28}{'size':<14}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for n in (8, 16, 32, 64):
        la = rng.normal(size=(n, n))
        kernels.sinkhorn_log(la, 20)  # warm the jit
        t_np = _time(kernels.sinkhorn_log_numpy, la, 20)
        t_nb = _time(kernels.sinkhorn_log, la, 20)
        print(f"{'sinkhorn_log (20 iters)':<28}{f'{n}x{n}':<14}"
              f"{t_np * 1e6:>10.1f}us{t_nb * 1e6:>10.1f}us{t_np / t_nb:>9.1f}x")

    for rows, dim in ((8, 32), (16, 32), (32, 32), (32, 64)):
        a = np.abs(rng.normal(size=(rows, dim)))
        b = np.abs(rng.normal(size=(rows + 4, dim)))
        kernels.alignment_distance(a, b, 20, 0.1)
        t_np = _time(kernels.alignment_distance_numpy, a, b, 20, 0.1)
        t_nb = _time(kernels.alignment_distance, a, b, 20, 0.1)
        print(f"{'alignment_distance':<28}{f'{rows}->{rows + 4} edges, d={dim}':<14}"
              f"{t_np * 1e6:>10.1f}us{t_nb * 1e6:>10.1f}us{t_np / t_nb:>9.1f}x")

    # a corpus-scan shaped workload: one query against many candidates
    corpus = [np.abs(rng.normal(size=(int(rng.integers(6, 24)), 32))) for _ in range(200)]
    query = np.abs(rng.normal(size=(14, 32)))

    def scan(dist_fn):
        return [dist_fn(query, c, 20, 0.1) for c in corpus]

    scan(kernels.alignment_distance)
    t_np = _time(scan, kernels.alignment_distance_numpy, repeat=3, inner=1)
    t_nb = _time(scan, kernels.alignment_distance, repeat=3, inner=1)
    print(f"{'corpus scan (200 graphs)':<28}{'q=14 edges':<14}"
          f"{t_np * 1e3:>10.1f}ms{t_nb * 1e3:>10.1f}ms{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
