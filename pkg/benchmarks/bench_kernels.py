"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from angle_embed import _kernels_py

try:
    from angle_embed import _kernels as compiled
except ImportError:
    compiled = None


def _cases(rng):
    for n in (8, 32, 128, 512):
        scores = rng.normal(size=n)
        labels = rng.integers(0, 6, n) / 5.0
        yield f"rank_loss n={n}", "rank_loss", (scores, labels, 0.05)
    for n in (100, 10_000):
        x = np.round(rng.normal(size=n), 2)
        yield f"average_ranks n={n}", "average_ranks", (x,)


def _best(fn, args, repeat):
    timer = timeit.Timer(lambda: fn(*args))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'case':<24}{'numpy (us)':>14}{'cython (us)':>14}{'speedup':>10}")
    for label, name, call_args in _cases(rng):
        py = _best(getattr(_kernels_py, name), call_args, args.repeat) * 1e6
        if compiled is None:
            print(f"{label:<24}{py:>14.1f}{'n/a':>14}{'':>10}")
            continue
        cy = _best(getattr(compiled, name), call_args, args.repeat) * 1e6
        print(f"{label:<24}{py:>14.1f}{cy:>14.1f}{py / cy:>9.1f}x")


if __name__ == "__main__":
    main()
