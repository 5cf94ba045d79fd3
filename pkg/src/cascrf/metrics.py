"""Saliency evaluation: PR curves, max F-measure, MAE.

Saliency maps are 8-bit for thresholding (the sliding-threshold curve
is defined over 0..255) and real-valued in [0, 1] for MAE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_THRESHOLDS = 256
F_BETA_SQUARED = 0.3


@dataclass(frozen=True)
class PrCurve:
    """Precision and recall at every integer threshold 0..255.

    A pixel counts as positive when its saliency value is >= the
    threshold.  Empty positive sets get precision 1 by convention.
    """

    precision: np.ndarray
    recall: np.ndarray

    def __post_init__(self):
        for a in (self.precision, self.recall):
            if a.shape != (N_THRESHOLDS,):
                raise ValueError(f"curve arrays must have shape ({N_THRESHOLDS},)")


def pr_curve(sal: np.ndarray, gt: np.ndarray) -> PrCurve:
    sal = np.asarray(sal)
    gt = np.asarray(gt)
    if sal.shape != gt.shape:
        raise ValueError(f"saliency {sal.shape} and ground truth {gt.shape} differ")
    if sal.dtype != np.uint8:
        raise ValueError("thresholding expects an 8-bit saliency map")
    fg = gt >= 0.5
    n_fg = int(fg.sum())
    if n_fg == 0:
        raise ValueError("ground truth has no foreground")

    # counts at exact value v; suffix sums give counts at sal >= t
    fg_hist = np.bincount(sal[fg].ravel(), minlength=N_THRESHOLDS)
    bg_hist = np.bincount(sal[~fg].ravel(), minlength=N_THRESHOLDS)
    tp = np.cumsum(fg_hist[::-1])[::-1].astype(np.float64)
    fp = np.cumsum(bg_hist[::-1])[::-1].astype(np.float64)
    predicted = tp + fp
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1.0), 1.0)
    recall = tp / n_fg
    return PrCurve(precision=precision, recall=recall)


def f_measure(precision, recall, beta_squared: float = F_BETA_SQUARED):
    """Weighted harmonic mean; zero wherever the numerator vanishes."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    num = (1.0 + beta_squared) * p * r
    den = beta_squared * p + r
    return np.where(num > 0, num / np.where(den > 0, den, 1.0), 0.0)


def max_f_measure(curve: PrCurve, beta_squared: float = F_BETA_SQUARED) -> float:
    return float(f_measure(curve.precision, curve.recall, beta_squared).max())


def mae(sal: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute difference between a [0, 1] map and the mask."""
    sal = np.asarray(sal, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if sal.shape != gt.shape:
        raise ValueError(f"saliency {sal.shape} and ground truth {gt.shape} differ")
    return float(np.abs(sal - gt).mean())


def dataset_metrics(sal_maps, gt_masks) -> dict:
    """Aggregate over a dataset.

    max_f thresholds the threshold-wise averaged curve (the usual
    benchmark protocol); mean_max_f averages per-image maxima instead.
    Both are reported since published numbers are ambiguous between
    them.  MAE averages per-image means.
    """
    sal_maps = list(sal_maps)
    gt_masks = list(gt_masks)
    if len(sal_maps) != len(gt_masks) or not sal_maps:
        raise ValueError("need matching, nonempty saliency and ground-truth lists")
    curves = [pr_curve(s, g) for s, g in zip(sal_maps, gt_masks)]
    per_image_f = [max_f_measure(c) for c in curves]
    per_image_mae = [mae(s / 255.0, g) for s, g in zip(sal_maps, gt_masks)]
    avg_p = np.mean([c.precision for c in curves], axis=0)
    avg_r = np.mean([c.recall for c in curves], axis=0)
    avg_curve = PrCurve(precision=avg_p, recall=avg_r)
    return {
        "max_f": max_f_measure(avg_curve),
        "mean_max_f": float(np.mean(per_image_f)),
        "mae": float(np.mean(per_image_mae)),
        "per_image_max_f": per_image_f,
        "per_image_mae": per_image_mae,
        "curve": avg_curve,
    }


def format_eval_csv(names, results: dict) -> str:
    """Per-image rows plus a dataset summary row, fixed six decimals so
    identical inputs give identical bytes."""
    lines = ["name,max_f,mae"]
    for name, f, m in zip(names, results["per_image_max_f"], results["per_image_mae"]):
        lines.append(f"{name},{f:.6f},{m:.6f}")
    lines.append(f"dataset,{results['max_f']:.6f},{results['mae']:.6f}")
    return "\n".join(lines) + "\n"


def format_pr_csv(curve: PrCurve) -> str:
    lines = ["threshold,precision,recall"]
    for t in range(N_THRESHOLDS):
        lines.append(f"{t},{curve.precision[t]:.6f},{curve.recall[t]:.6f}")
    return "\n".join(lines) + "\n"
