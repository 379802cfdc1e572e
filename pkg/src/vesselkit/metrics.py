"""Voxel-wise confusion metrics and the hit-or-miss bifurcation protocol.

Undefined quantities (empty denominators) are returned as ``None``, never
silently as 0 or 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from vesselkit.volume import LabelVolume

UNDEFINED = None


def _mask(x) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, LabelVolume) else getattr(x, "data", x))
    return arr.astype(bool)


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt) -> Confusion:
    p = _mask(pred)
    g = _mask(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return Confusion(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int) -> Optional[float]:
    return UNDEFINED if den == 0 else num / den


def precision_recall_dice(c: Confusion):
    """``(precision, recall, dice)``; any may be ``None`` when undefined."""
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    dice = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    return precision, recall, dice


def pr_ratio(precision: Optional[float], recall: Optional[float]) -> Optional[float]:
    if precision is None or recall is None or recall == 0:
        return UNDEFINED
    return precision / recall


def threshold_probs(probs, t: float = 0.5, kind: str = "vessel") -> LabelVolume:
    """Binary mask of voxels with probability ``>= t``."""
    arr = np.asarray(getattr(probs, "data", probs))
    spacing = getattr(probs, "spacing", (1.0, 1.0, 1.0))
    return LabelVolume(arr >= t, kind, spacing)


@dataclass(frozen=True)
class DetectionReport:
    precision: Optional[float]
    recall: Optional[float]
    detection_pct: Optional[float]
    mean_err: Optional[float]
    err_std: Optional[float]
    hits: int = 0
    misses: int = 0
    true_positive_voxels: int = 0
    false_positive_voxels: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def bifurcation_hit_or_miss(pred, gt_points: Sequence, cube_half: int = 2) -> DetectionReport:
    """Score a predicted bifurcation mask against ground-truth points.

    A point is hit when some predicted voxel lies within Chebyshev distance
    ``2 * cube_half`` (its cube overlaps the prediction).  A predicted voxel
    is a false positive when its own cube holds no ground-truth point
    (Chebyshev distance ``> cube_half``).  Errors are Euclidean distances from
    each hit point to its nearest predicted voxel.
    """
    mask = _mask(pred)
    pts = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if pts.size and (np.any(pts < 0) or np.any(pts > np.array(mask.shape) - 1)):
        raise ValueError("ground-truth points must lie inside the volume")
    vox = np.argwhere(mask).astype(np.float64)

    hits = 0
    errors: list[float] = []
    if len(pts) and len(vox):
        tree = cKDTree(vox)
        cheb, _ = tree.query(pts, k=1, p=np.inf)
        eucl, _ = tree.query(pts, k=1, p=2)
        hit = cheb <= 2 * cube_half
        hits = int(hit.sum())
        errors = [float(e) for e in eucl[hit]]

    tp_vox = fp_vox = 0
    if len(vox):
        if len(pts):
            d, _ = cKDTree(pts).query(vox, k=1, p=np.inf)
            tp_vox = int(np.count_nonzero(d <= cube_half))
        fp_vox = len(vox) - tp_vox

    recall = _ratio(hits, len(pts))
    precision = _ratio(tp_vox, len(vox))
    mean_err = float(np.mean(errors)) if errors else UNDEFINED
    err_std = float(np.std(errors)) if errors else UNDEFINED
    return DetectionReport(
        precision=precision,
        recall=recall,
        detection_pct=recall,
        mean_err=mean_err,
        err_std=err_std,
        hits=hits,
        misses=len(pts) - hits,
        true_positive_voxels=tp_vox,
        false_positive_voxels=fp_vox,
    )
