"""Compare the numba and numpy schedule kernels.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from ssnsim import _kernels

CASES = {
    "reference (5/10/15)": ([5, 10, 15], 30),
    "coprime (7/11/13)": ([7, 11, 13], 1001),
    "wide (59/58/57)": ([59, 58, 57], 59 * 58 * 57),
    "day-scale (3600/86400/7)": ([3600, 86400, 7], 604800),
}


def bench(fn_mask, fn_compress, periods, hp, repeat):
    p = np.asarray(periods, dtype=np.int64)
    b = np.array([1, 2, 4][: len(p)], dtype=np.int64)

    def once():
        fn_compress(fn_mask(p, b, hp))

    once()  # warm-up, also triggers JIT compilation
    return min(timeit.repeat(once, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = [("numpy", _kernels.event_mask_numpy, _kernels.compress_mask_numpy)]
    if _kernels.HAVE_NUMBA:
        backends.append(("numba", _kernels.event_mask_numba, _kernels.compress_mask_numba))
    else:
        print("numba not installed; numpy only")
    print(f"{'case':28s}" + "".join(f"{name:>12s}" for name, _, _ in backends) + "     speedup")
    for label, (periods, hp) in CASES.items():
        times = [bench(m, c, periods, hp, args.repeat) for _, m, c in backends]
        row = f"{label:28s}" + "".join(f"{t * 1e3:10.3f}ms" for t in times)
        if len(times) == 2:
            row += f"  {times[0] / times[1]:8.2f}x"
        print(row)


if __name__ == "__main__":
    main()
