"""Pure-Python/numpy versions of the compiled metric kernels.

Same contracts as ``_ckernels``. The distance transform here uses a
different exact method (nearest-feature scan along rows, then a brute
minimum over columns) so the two backends cross-check each other.
"""

from __future__ import annotations

import numpy as np


def _nearest_along_axis0(feat: np.ndarray) -> np.ndarray:
    """Row distance to the nearest feature in the same column (inf if none)."""
    h, w = feat.shape
    dist = np.full((h, w), np.inf)
    run = np.full(w, np.inf)
    for i in range(h):
        run = np.where(feat[i], 0.0, run + 1.0)
        dist[i] = run
    run = np.full(w, np.inf)
    for i in range(h - 1, -1, -1):
        run = np.where(feat[i], 0.0, run + 1.0)
        dist[i] = np.minimum(dist[i], run)
    return dist


def edt_sq(features, sy: float = 1.0, sx: float = 1.0) -> np.ndarray:
    feat = np.asarray(features) != 0
    h, w = feat.shape
    if h == 0 or w == 0:
        return np.zeros((h, w))
    if not feat.any():
        return np.full((h, w), np.inf)
    g2 = (_nearest_along_axis0(feat) * sy) ** 2  # (h, w)
    cols = np.arange(w, dtype=np.float64)
    dx2 = ((cols[:, None] - cols[None, :]) * sx) ** 2  # (j, k)
    out = np.empty((h, w))
    chunk = max(1, 2_000_000 // max(w * w, 1))
    for r0 in range(0, h, chunk):
        g = g2[r0 : r0 + chunk]  # (r, k)
        out[r0 : r0 + chunk] = np.min(g[:, None, :] + dx2[None, :, :], axis=2)
    return out


def boundary_mask(mask) -> np.ndarray:
    m = np.asarray(mask) != 0
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return (m & ~interior).astype(np.uint8)


def confusion_counts(truth, pred, k: int) -> np.ndarray:
    t = np.asarray(truth, dtype=np.int64)
    p = np.asarray(pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError("truth and pred lengths differ")
    bad = np.flatnonzero((t < 0) | (t >= k) | (p < 0) | (p >= k))
    if bad.size:
        raise ValueError(f"label out of range [0, {k}) at position {int(bad[0])}")
    out = np.zeros((k, k), dtype=np.int64)
    np.add.at(out, (t, p), 1)
    return out
