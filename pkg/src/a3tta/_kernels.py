"""Surface-distance kernels with a numba path and a pure-numpy fallback.

Set ``A3TTA_DISABLE_NUMBA=1`` to force the numpy path (or when numba is not
importable). Both paths return identical values.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("A3TTA_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def min_distances_numpy(src: np.ndarray, dst: np.ndarray, spacing=(1.0, 1.0),
                        chunk: int = 2048) -> np.ndarray:
    """For each row of ``src`` (K, 2), the Euclidean distance to the nearest row of ``dst``."""
    sp = np.asarray(spacing, dtype=np.float64)
    a = src.astype(np.float64) * sp
    b = dst.astype(np.float64) * sp
    out = np.empty(len(a))
    for start in range(0, len(a), chunk):
        blk = a[start:start + chunk]
        d2 = ((blk[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        out[start:start + chunk] = np.sqrt(d2.min(axis=1))
    return out


if HAVE_NUMBA:
    @njit(cache=True)
    def _min_distances_nb(src, dst, sy, sx):
        out = np.empty(src.shape[0])
        for i in range(src.shape[0]):
            best = np.inf
            y0 = src[i, 0] * sy
            x0 = src[i, 1] * sx
            for j in range(dst.shape[0]):
                dy = y0 - dst[j, 0] * sy
                dx = x0 - dst[j, 1] * sx
                d = dy * dy + dx * dx
                if d < best:
                    best = d
            out[i] = np.sqrt(best)
        return out

    def min_distances_numba(src, dst, spacing=(1.0, 1.0)) -> np.ndarray:
        return _min_distances_nb(np.ascontiguousarray(src, dtype=np.float64),
                                 np.ascontiguousarray(dst, dtype=np.float64),
                                 float(spacing[0]), float(spacing[1]))
else:
    min_distances_numba = None


def min_distances(src, dst, spacing=(1.0, 1.0)) -> np.ndarray:
    if HAVE_NUMBA:
        return min_distances_numba(src, dst, spacing)
    return min_distances_numpy(src, dst, spacing)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-connected background neighbour.

    Pixels outside the image count as background.
    """
    m = np.pad(mask.astype(bool), 1, constant_values=False)
    core = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return core & ~interior
