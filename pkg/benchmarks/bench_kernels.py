"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--size 352] [--repeat 20]

The first numba call (compilation) is excluded from the timings.
"""

import argparse
import time

import numpy as np

from divsal import kernels
from divsal.metrics import THRESHOLDS


def best_of(fn, repeat):
    fn()  # warm-up / JIT compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=352, help="side of the square test images")
    p.add_argument("--samples", type=int, default=16, help="stack depth for entropy maps")
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args()
    if not kernels.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    pred = rng.random((args.size, args.size))
    gt = (rng.random((args.size, args.size)) > 0.7).astype(np.uint8)
    stack = rng.random((args.samples, args.size, args.size))
    mask = np.zeros((args.size, args.size), np.uint8)
    mask[args.size // 4 : 3 * args.size // 4, args.size // 4 : 3 * args.size // 4] = 1

    cases = {
        "threshold_counts": lambda nb: kernels.threshold_counts(pred, gt, THRESHOLDS, use_numba=nb),
        "entropy_maps": lambda nb: kernels.entropy_maps(stack, use_numba=nb),
        "binary_morph r=2": lambda nb: kernels.binary_morph(mask, 2, True, use_numba=nb),
    }
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, fn in cases.items():
        t_np = best_of(lambda: fn(False), args.repeat)
        t_nb = best_of(lambda: fn(True), args.repeat)
        print(f"{name:<18} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
