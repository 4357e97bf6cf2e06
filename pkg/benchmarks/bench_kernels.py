"""Times the numpy and numba variants of every hot kernel.

Run: python3 benchmarks/bench_kernels.py [--repeats N]
The numba column is absent when numba is not installed.
"""

import argparse
import time

import numpy as np

from qivr import kernels


def timeit(fn, args, repeats):
    fn(*args)  # warm-up; also triggers JIT compilation
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def make_cases(rng):
    x = rng.standard_normal((20000, 16))
    means = rng.standard_normal((32, 16))
    variances = rng.random((32, 16)) + 0.2

    points = rng.standard_normal((20000, 8))
    centroids = rng.standard_normal((1024, 8))

    db = rng.integers(0, 2 ** 63, size=(200000, 4), dtype=np.int64).astype(np.uint64)
    query = rng.integers(0, 2 ** 63, size=4, dtype=np.int64).astype(np.uint64)

    n_keys, n_postings, n_scenes = 5000, 400000, 2000
    key_idx = rng.integers(-1, n_keys, size=3000).astype(np.int64)
    weights = rng.random(3000)
    offsets = np.zeros(n_keys + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(rng.multinomial(n_postings, np.ones(n_keys) / n_keys))
    ordinals = rng.integers(0, n_scenes, size=n_postings).astype(np.int32)
    scores = np.zeros(n_scenes)

    return {
        "gauss_logprob": (x, means, variances),
        "assign_nearest": (points, centroids),
        "hamming_distances": (db, query),
        "accumulate_postings": (key_idx, weights, offsets, ordinals, scores),
    }


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    cases = make_cases(np.random.default_rng(0))
    print(f"selected backend: {kernels.backend_name()}    repeats: {args.repeats}")
    header = f"{'kernel':<22}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, case in cases.items():
        np_time = timeit(getattr(kernels, f"{name}_numpy"), case, args.repeats)
        row = f"{name:<22}{np_time * 1e3:>12.3f}"
        if kernels.NUMBA_AVAILABLE:
            nb_time = timeit(getattr(kernels, f"{name}_numba"), case, args.repeats)
            row += f"{nb_time * 1e3:>12.3f}{np_time / nb_time:>9.1f}x"
        else:
            row += f"{'n/a':>12}{'n/a':>10}"
        print(row)


if __name__ == "__main__":
    main()
