"""Timing comparison of the numba kernels against the numpy fallback.

Run as a script:

    python3 benchmarks/bench_kernels.py

Both backends live side by side in ``fhsim.kernels.IMPLEMENTATIONS``, so a
single process can time them on identical inputs. Results are wall-clock
best-of-five after a warmup call (which also pays numba's compile cost).
"""

import time

import numpy as np

from fhsim import kernels

REPEATS = 5


def best_of(fn, *args):
    fn(*args)  # warmup / jit compile
    best = float("inf")
    for _ in range(REPEATS):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def workload():
    rng = np.random.default_rng(7)
    src = np.ascontiguousarray(rng.normal(size=(150, 150, 10)))
    mask = np.ascontiguousarray(rng.integers(0, 4, size=(150, 150, 10)).astype(np.uint8))
    n = 60 * 60 * 12
    xs = np.ascontiguousarray(rng.uniform(-1, 150, size=n))
    ys = np.ascontiguousarray(rng.uniform(-1, 150, size=n))
    zs = np.ascontiguousarray(rng.uniform(-1, 10, size=n))
    vol = np.ascontiguousarray(rng.normal(size=(64, 64, 12)))
    cavity = np.array([36.0, 36.0, 30.0, 10.0, 9.0, 12.0])
    outer = np.array([36.0, 36.0, 30.0, 16.0, 15.0, 17.0])
    rv = np.array([18.0, 34.0, 30.0, 9.0, 12.0, 11.0])
    return {
        "trilinear_sample": (src, xs, ys, zs, 0.0),
        "nearest_sample": (mask, xs, ys, zs, 0),
        "block_mean_pool": (vol, 2),
        "rasterize_phantom": ((60, 60, 12), (1.2, 1.2, 5.0), cavity, outer, rv),
    }


def main():
    if "numba" not in kernels.IMPLEMENTATIONS:
        raise SystemExit("numba backend unavailable; nothing to compare")
    args_by_kernel = workload()
    print(f"{'kernel':<20} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, args in args_by_kernel.items():
        t_np = best_of(kernels.IMPLEMENTATIONS["numpy"][name], *args)
        t_nb = best_of(kernels.IMPLEMENTATIONS["numba"][name], *args)
        a = kernels.IMPLEMENTATIONS["numpy"][name](*args)
        b = kernels.IMPLEMENTATIONS["numba"][name](*args)
        assert np.array_equal(a, b), f"{name}: backends disagree"
        print(f"{name:<20} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms "
              f"{t_np / t_nb:>7.1f}x")
    print("outputs verified bitwise-identical across backends")


if __name__ == "__main__":
    main()
