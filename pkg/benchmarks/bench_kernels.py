"""Compare the numba and numpy surface-distance kernels, and time one ASSD call.

    python benchmarks/bench_kernels.py [--points 2000] [--repeats 5]
"""
import argparse
import time

import numpy as np

from a3tta import _kernels
from a3tta.metrics import assd


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=2000)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    src = rng.integers(0, 512, size=(args.points, 2))
    dst = rng.integers(0, 512, size=(args.points, 2))

    t_np = best_of(lambda: _kernels.min_distances_numpy(src, dst), args.repeats)
    print(f"numpy  min_distances ({args.points}x{args.points}): {1e3 * t_np:8.2f} ms")
    if _kernels.HAVE_NUMBA:
        _kernels.min_distances_numba(src[:2], dst[:2])  # compile outside the timing
        t_nb = best_of(lambda: _kernels.min_distances_numba(src, dst), args.repeats)
        same = np.array_equal(_kernels.min_distances_numpy(src, dst),
                              _kernels.min_distances_numba(src, dst))
        print(f"numba  min_distances ({args.points}x{args.points}): {1e3 * t_nb:8.2f} ms  "
              f"speedup {t_np / t_nb:5.1f}x  identical={same}")
    else:
        print("numba path unavailable (A3TTA_DISABLE_NUMBA set or numba missing)")

    yy, xx = np.mgrid[:256, :256]
    gt = ((yy - 128) ** 2 + (xx - 128) ** 2 < 80 ** 2).astype(np.uint8)
    pred = ((yy - 120) ** 2 + (xx - 131) ** 2 < 78 ** 2).astype(np.uint8)
    t_assd = best_of(lambda: assd(pred, gt, 1), args.repeats)
    print(f"assd on 256x256 disc pair (active path): {1e3 * t_assd:8.2f} ms")


if __name__ == "__main__":
    main()
