"""Brute-force reference implementations used to check the fast metrics.

Everything here is deliberately naive: explicit neighbour loops and
all-pairs distances. Keep these free of any dependency on ``kernels``.
"""

from __future__ import annotations

import math

import numpy as np


def brute_boundary(mask) -> list[tuple[int, int]]:
    m = np.asarray(mask) != 0
    h, w = m.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                a, b = i + di, j + dj
                if a < 0 or b < 0 or a >= h or b >= w or not m[a, b]:
                    pts.append((i, j))
                    break
    return pts


def brute_dice_iou(pred, truth) -> tuple[float, float]:
    p = {tuple(x) for x in np.argwhere(np.asarray(pred) != 0)}
    t = {tuple(x) for x in np.argwhere(np.asarray(truth) != 0)}
    if not p and not t:
        return 1.0, 1.0
    inter = len(p & t)
    return 2.0 * inter / (len(p) + len(t)), inter / len(p | t)


def _point_to_set(pt, pts, spacing) -> float:
    sy, sx = spacing
    return min(math.sqrt(((pt[0] - q[0]) * sy) ** 2 + ((pt[1] - q[1]) * sx) ** 2) for q in pts)


def brute_directed(pred, truth, spacing=(1.0, 1.0)):
    bp, bt = brute_boundary(pred), brute_boundary(truth)
    if not bp or not bt:
        return None
    return [_point_to_set(p, bt, spacing) for p in bp], [_point_to_set(q, bp, spacing) for q in bt]


def brute_asd(pred, truth, spacing=(1.0, 1.0)):
    d = brute_directed(pred, truth, spacing)
    if d is None:
        return None
    a, b = d
    return 0.5 * (sum(a) / len(a) + sum(b) / len(b))


def brute_hausdorff(pred, truth, spacing=(1.0, 1.0)):
    d = brute_directed(pred, truth, spacing)
    if d is None:
        return None
    return max(max(d[0]), max(d[1]))


def brute_confusion(truth, pred, k: int) -> list[list[int]]:
    out = [[0] * k for _ in range(k)]
    for t, p in zip(truth, pred):
        out[int(t)][int(p)] += 1
    return out


def brute_edt_sq(features, sy=1.0, sx=1.0) -> np.ndarray:
    f = np.argwhere(np.asarray(features) != 0)
    h, w = np.asarray(features).shape
    out = np.full((h, w), np.inf)
    for i in range(h):
        for j in range(w):
            for a, b in f:
                out[i, j] = min(out[i, j], ((i - a) * sy) ** 2 + ((j - b) * sx) ** 2)
    return out
