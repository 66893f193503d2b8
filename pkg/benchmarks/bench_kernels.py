"""Time the numpy and numba flavours of each hot kernel on the same inputs.

    python benchmarks/bench_kernels.py [--scale 1.0] [--repeat 5]

The first numba call (compilation) is excluded from the timings. Outputs of
the two flavours are compared before timing.
"""

import argparse
import statistics
import time

import numpy as np

from trajsurprise import kernels
from trajsurprise.baselines import IsolationForest


def _time(fn, repeat):
    runs = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        runs.append(time.perf_counter() - t0)
    return statistics.median(runs)


def _cases(scale: float, rng):
    n = int(200_000 * scale)
    lat1, lat2 = rng.uniform(-80, 80, (2, n))
    lon1, lon2 = rng.uniform(-180, 180, (2, n))
    yield ("haversine", (lat1, lon1, lat2, lon2),
           kernels.haversine_km_numpy, kernels.haversine_km_numba)

    m = int(50_000 * scale)
    steps = rng.normal(0, 5e-4, (m, 2)) * (rng.random((m, 1)) < 0.2)
    walk = 39.9 + np.cumsum(steps, axis=0)
    t = np.cumsum(rng.uniform(30, 120, m))
    yield ("staypoint_runs", (walk[:, 0], walk[:, 1] + 76.4, t, 200.0, 1800.0),
           kernels.staypoint_runs_numpy, kernels.staypoint_runs_numba)

    rows, width, k = 5_000, 16, int(100_000 * scale)
    idx = rng.integers(0, rows, k)
    src = rng.normal(size=(k, width))
    yield ("scatter_add_rows", (idx, src),
           lambda i, s: kernels.scatter_add_rows_numpy(np.zeros((rows, width)), i, s),
           lambda i, s: kernels.scatter_add_rows_numba(np.zeros((rows, width)), i, s))

    X = rng.normal(size=(int(5_000 * scale), 9))
    f = IsolationForest(n_trees=100, subsample_size=256, seed=0).fit(X)
    arrays = (X, f.roots, f.feature, f.threshold, f.left, f.right, f.leaf_value)
    yield ("forest_path_lengths", arrays,
           kernels.forest_path_lengths_numpy, kernels.forest_path_lengths_numba)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scale", type=float, default=1.0, help="multiply problem sizes")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<22}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, inputs, np_fn, nb_fn in _cases(args.scale, rng):
        a, b = np_fn(*inputs), nb_fn(*inputs)   # also triggers compilation
        if not np.allclose(a, b, rtol=1e-12, atol=1e-9):
            raise SystemExit(f"{name}: numpy and numba outputs differ")
        t_np = _time(lambda: np_fn(*inputs), args.repeat)
        t_nb = _time(lambda: nb_fn(*inputs), args.repeat)
        print(f"{name:<22}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
