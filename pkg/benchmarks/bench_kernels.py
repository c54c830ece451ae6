"""Time the compiled and pure-Python metric kernels on random masks.

    python benchmarks/bench_kernels.py --sizes 64 256 512 --repeat 5
"""

import argparse
import timeit

import numpy as np

from lesionsynth.metrics import kernels


def _cases(size: int, rng: np.random.Generator):
    y, x = np.mgrid[:size, :size]
    r = size / 4
    # a blob plus speckle: realistic boundary length and many seed pixels
    mask = (((y - size / 2) ** 2 + (x - size / 2) ** 2 < r * r) | (rng.random((size, size)) < 0.002)).astype(np.uint8)
    n = size * size
    truth = rng.integers(0, 7, n).astype(np.int64)
    pred = rng.integers(0, 7, n).astype(np.int64)
    return {
        "edt_sq": lambda be: be.edt_sq(mask, 1.0, 1.0),
        "boundary_mask": lambda be: be.boundary_mask(mask),
        "confusion_counts": lambda be: be.confusion_counts(truth, pred, 7),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 256, 512])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    names = sorted(backends)
    if "cython" not in backends:
        print("compiled kernels not available; timing the Python fallback only")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<18}{'size':>6}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'speedup':>10}")
    for size in args.sizes:
        for kname, fn in _cases(size, rng).items():
            ms = {}
            for n in names:
                be = backends[n]
                fn(be)  # warm-up
                ms[n] = min(timeit.repeat(lambda: fn(be), number=1, repeat=args.repeat)) * 1e3
            speed = f"{ms['python'] / ms['cython']:.1f}x" if "cython" in ms else "-"
            print(f"{kname:<18}{size:>6}" + "".join(f"{ms[n]:>14.3f}" for n in names) + f"{speed:>10}")


if __name__ == "__main__":
    main()
