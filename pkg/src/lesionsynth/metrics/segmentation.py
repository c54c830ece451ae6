"""Overlap and boundary-distance metrics for binary masks.

Boundaries are 4-connected: a foreground pixel belongs to the boundary if
any 4-neighbour is background, with pixels outside the image counted as
background. Distances are Euclidean in units of ``spacing``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


class UndefinedMetricError(ValueError):
    """ASD/HD requested for a pair where one boundary is empty."""


@dataclass
class MaskPair:
    pred: np.ndarray
    truth: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.pred = np.asarray(self.pred)
        self.truth = np.asarray(self.truth)
        if self.pred.shape != self.truth.shape or self.pred.ndim != 2:
            raise ValueError(f"mask shapes differ or are not 2-d: {self.pred.shape} vs {self.truth.shape}")
        for name, m in (("pred", self.pred), ("truth", self.truth)):
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"{name} mask is not binary")
        self.pred = self.pred.astype(bool)
        self.truth = self.truth.astype(bool)


def dice_iou(p: MaskPair) -> tuple[float, float]:
    """Dice and IoU; two empty masks score (1, 1)."""
    inter = int(np.count_nonzero(p.pred & p.truth))
    a, b = int(np.count_nonzero(p.pred)), int(np.count_nonzero(p.truth))
    union = a + b - inter
    if a + b == 0:
        return 1.0, 1.0
    return 2.0 * inter / (a + b), inter / union


def boundary_pixels(mask) -> np.ndarray:
    """(n, 2) array of boundary pixel coordinates in row-major order."""
    return np.argwhere(kernels.boundary_mask(mask))


def _directed(p: MaskPair):
    """Distances from each boundary pixel of one mask to the other's boundary."""
    bp = kernels.boundary_mask(p.pred)
    bt = kernels.boundary_mask(p.truth)
    if not bp.any() or not bt.any():
        which = "prediction" if not bp.any() else "ground truth"
        raise UndefinedMetricError(f"{which} boundary is empty; surface distance is undefined")
    sy, sx = p.spacing
    d_to_t = np.sqrt(kernels.edt_sq(bt, sy, sx))[bp.astype(bool)]
    d_to_p = np.sqrt(kernels.edt_sq(bp, sy, sx))[bt.astype(bool)]
    return d_to_t, d_to_p


def asd(p: MaskPair) -> float:
    a, b = _directed(p)
    return 0.5 * (float(a.mean()) + float(b.mean()))


def hausdorff(p: MaskPair) -> float:
    a, b = _directed(p)
    return max(float(a.max()), float(b.max()))


def segmentation_scores(p: MaskPair) -> dict[str, float | None]:
    """All four metrics; ASD/HD are None when undefined."""
    dice, iou = dice_iou(p)
    try:
        a, b = _directed(p)
        return {"dice": dice, "iou": iou, "asd": 0.5 * (a.mean() + b.mean()), "hd": max(a.max(), b.max())}
    except UndefinedMetricError:
        return {"dice": dice, "iou": iou, "asd": None, "hd": None}
