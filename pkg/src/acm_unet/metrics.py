"""Hard segmentation metrics: Dice overlap and the 95% Hausdorff distance.

Boundary points are foreground pixels with at least one background
4-neighbor, the image border counting as background. HD95 pools the directed
nearest-neighbor distances from both boundary sets into one ascending list
and takes the entry at index ceil(0.95 * len) - 1; it is undefined (None)
when either boundary set is empty. Distances are Euclidean on pixel centers
scaled by the (row, col) spacing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import ShapeMismatch


def dsc_metric(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); both masks empty counts as perfect agreement."""
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mask shapes {pred.shape} vs {gt.shape}")
    p = int(pred.sum())
    g = int(gt.sum())
    if p == 0 and g == 0:
        return 1.0
    if p == 0 or g == 0:
        return 0.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (p + g)


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """[k, 2] (row, col) foreground pixels with a background 4-neighbor."""
    m = np.asarray(mask, bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] &
                padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def _directed_min_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """min_b |a - b| for every a; points already spacing-scaled."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2)).min(axis=1)


def hd95(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0),
         percentile: float = 0.95):
    """Pooled-percentile Hausdorff distance; None when undefined."""
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mask shapes {pred.shape} vs {gt.shape}")
    a = boundary_points(pred)
    b = boundary_points(gt)
    if len(a) == 0 or len(b) == 0:
        return None
    scale = np.asarray(spacing, np.float64)
    a = a.astype(np.float64) * scale
    b = b.astype(np.float64) * scale
    dists = np.concatenate([_directed_min_dists(a, b),
                            _directed_min_dists(b, a)])
    dists.sort()
    idx = int(np.ceil(percentile * len(dists))) - 1
    return float(dists[max(idx, 0)])


def hausdorff(pred, gt, spacing=(1.0, 1.0)):
    """Exact (100th percentile) Hausdorff distance on the same boundaries."""
    return hd95(pred, gt, spacing, percentile=1.0)


@dataclass
class MetricsReport:
    """Per-foreground-class Dice and HD95 over an evaluation set."""

    classes: list = field(default_factory=list)
    per_class_dsc: list = field(default_factory=list)
    per_class_hd95: list = field(default_factory=list)   # None when undefined
    hd95_defined: list = field(default_factory=list)
    hd95_undefined: list = field(default_factory=list)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(self.per_class_dsc)) if self.per_class_dsc else 0.0

    @property
    def mean_hd95(self):
        vals = [v for v in self.per_class_hd95 if v is not None]
        return float(np.mean(vals)) if vals else None

    def to_csv(self) -> str:
        lines = ["class,dsc,hd95,hd95_defined,hd95_undefined"]
        for i, cls in enumerate(self.classes):
            hd = self.per_class_hd95[i]
            hd_s = f"{hd:.6g}" if hd is not None else "nan"
            lines.append(f"{cls},{self.per_class_dsc[i]:.6g},{hd_s},"
                         f"{self.hd95_defined[i]},{self.hd95_undefined[i]}")
        mhd = self.mean_hd95
        mhd_s = f"{mhd:.6g}" if mhd is not None else "nan"
        lines.append(f"mean,{self.mean_dsc:.6g},{mhd_s},"
                     f"{sum(self.hd95_defined)},{sum(self.hd95_undefined)}")
        return "\n".join(lines) + "\n"

    def __str__(self):
        parts = [f"mean DSC {self.mean_dsc:.4f}"]
        mhd = self.mean_hd95
        parts.append(f"mean HD95 {mhd:.4f}" if mhd is not None
                     else "mean HD95 undefined")
        per = ", ".join(
            f"c{cls}: dsc {d:.3f}" for cls, d in
            zip(self.classes, self.per_class_dsc))
        return f"{' | '.join(parts)} ({per})"


def evaluate_masks(pred_labels: np.ndarray, gt_labels: np.ndarray,
                   num_classes: int, spacing=(1.0, 1.0)) -> MetricsReport:
    """Foreground per-class metrics over a stack of label maps [n, h, w]."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ShapeMismatch(
            f"label stacks {pred_labels.shape} vs {gt_labels.shape}")
    report = MetricsReport()
    for cls in range(1, num_classes):
        dscs, hds, undef = [], [], 0
        for i in range(pred_labels.shape[0]):
            p = pred_labels[i] == cls
            g = gt_labels[i] == cls
            dscs.append(dsc_metric(p, g))
            hd = hd95(p, g, spacing)
            if hd is None:
                undef += 1
            else:
                hds.append(hd)
        report.classes.append(cls)
        report.per_class_dsc.append(float(np.mean(dscs)))
        report.per_class_hd95.append(float(np.mean(hds)) if hds else None)
        report.hd95_defined.append(len(hds))
        report.hd95_undefined.append(undef)
    return report
