"""Time the numba kernels against their numpy twins on desk-scale inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]

Both implementations are imported directly, so the env flag that selects
the runtime path does not matter here. Each row reports the best of
``repeat`` timings and the largest absolute difference between outputs.
"""
import argparse
import time

import numpy as np

from distforge import features, garch, market_sim, moments, spline


def best_time(fn, args, repeat):
    fn(*args)  # warm-up, includes JIT compilation for the numba side
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.nanmax(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a, b))


def cases(scale):
    rng = np.random.default_rng(0)
    T, N = int(5280 * scale), int(100 * scale) or 1
    P = int(10_000 * scale)
    r = rng.standard_t(5, (T, N)) * 0.02
    r[rng.random((T, N)) < 0.01] = np.nan
    eps = rng.standard_normal(int(756 * 10 * scale)) * 0.01
    z = rng.standard_normal((P, 22))
    zm = rng.standard_normal((P, 22))
    jumps = np.where(rng.random((P, 22)) < 0.01, rng.standard_normal((P, 22)) * 0.25, 0.0)
    zp = rng.standard_normal((T, N))
    jp = np.zeros((T, N))
    a_i = np.full(N, 0.05)
    x = np.sort(rng.normal(0, 0.1, 4000))
    d = np.abs(rng.normal(1, 0.1, 4000))
    knots = np.sort(rng.normal(0, 0.1, 37))
    yk = np.linspace(0.01, 0.99, 37)
    return [
        ("ewma panel", features._ewma_nb, features._ewma_np, (r, 0.94)),
        ("garch filter", garch._filter_nb, garch._filter_np,
         (eps, 1e-6, 0.05, 0.9, 0.03, 1e-4)),
        ("garch mc paths", garch._paths_nb, garch._paths_np,
         (z, 1e-4, 1e-6, 0.05, 0.9, 0.03, 2e-4, -1.0, np.inf)),
        ("panel simulation", market_sim._simulate_nb, market_sim._simulate_np,
         (zp[:, 0].copy(), zp, jp, 2.5e-7, 0.06, 0.94, 1e-4, np.ones(N),
          np.full(N, 4e-6), a_i, np.full(N, 0.9), np.full(N, 0.03), -0.9, 10.0)),
        ("true-quantile paths", market_sim._paths_nb, market_sim._paths_np,
         (zm, z, jumps, 1e-4, 2.5e-7, 0.06, 0.94, 1.0, 4e-4, 4e-6, 0.05, 0.03, 0.9,
          -0.9, 10.0)),
        ("moment power sums", moments._power_sums_nb, moments._power_sums_np, (x, d)),
        ("not-a-knot slopes", spline._nak_slopes_nb, spline._nak_slopes_np, (knots, yk)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="inputs at 1/10 size")
    args = ap.parse_args(argv)
    rows = []
    print(f"{'kernel':<22}{'numba ms':>11}{'numpy ms':>11}{'speed-up':>10}{'max diff':>12}")
    for name, nb, npf, inputs in cases(0.1 if args.quick else 1.0):
        t_nb, o_nb = best_time(nb, inputs, args.repeat)
        t_np, o_np = best_time(npf, inputs, args.repeat)
        diff = max_diff(o_nb, o_np)
        rows.append((name, t_nb, t_np, diff))
        print(f"{name:<22}{t_nb * 1e3:>11.3f}{t_np * 1e3:>11.3f}{t_np / t_nb:>9.1f}x{diff:>12.2e}")
    return rows


if __name__ == "__main__":
    main()
