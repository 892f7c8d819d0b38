"""Time the compiled and pure-Python kernel backends against each other.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from collapse_lab import _backend

SHAPES = [(3, 4, 6), (4, 10, 10), (10, 20, 32)]


def bench(kern, fn, H, K, n, number):
    if fn == "loss_and_grad":
        call = lambda: kern.loss_and_grad(H, K, n, 2.0, 0.125)
    else:
        call = lambda: kern.rk4_step(H, K, n, 2.0, 0.125, 1e-3, 1)
    return min(timeit.repeat(call, number=number, repeat=5)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000, help="calls per timing sample")
    args = ap.parse_args(argv)
    names = _backend.available()
    print(f"backends: {', '.join(names)} (default: {_backend.BACKEND})")
    print(f"{'kernel':<14}{'K,n,d':<11}" + "".join(f"{b + ' [us]':>16}" for b in names) + f"{'speedup':>10}")
    for K, n, d in SHAPES:
        H = np.random.default_rng(0).standard_normal((d, K * n))
        for fn in ("loss_and_grad", "rk4_step"):
            times = [bench(_backend.load(b), fn, H, K, n, args.repeat) for b in names]
            speed = f"{times[-1] / times[0]:.2f}x" if len(times) > 1 else "-"
            print(f"{fn:<14}{f'{K},{n},{d}':<11}" + "".join(f"{1e6 * t:16.2f}" for t in times) + f"{speed:>10}")


if __name__ == "__main__":
    main()
