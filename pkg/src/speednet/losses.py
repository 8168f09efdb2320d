"""Tversky loss and the binary segmentation metrics."""
from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

from speednet.ops import ShapeError

METRIC_NAMES = ("dice", "jaccard", "precision", "recall")


@dataclass(frozen=True)
class TverskyParams:
    alpha: float = 0.3  # weight on false positives
    beta: float = 0.7   # weight on false negatives
    smooth: float = 1.0


@dataclass(frozen=True)
class ConfusionCounts:
    tp: float
    fp: float
    fn: float
    tn: float

    def scaled(self, k) -> "ConfusionCounts":
        return ConfusionCounts(self.tp * k, self.fp * k, self.fn * k, self.tn * k)


@dataclass(frozen=True)
class MetricSet:
    dice: float
    jaccard: float
    precision: float
    recall: float

    def as_tuple(self):
        return astuple(self)


def _per_image_sums(pred, target):
    if pred.shape != target.shape:
        raise ShapeError("tversky_loss", "target.shape", pred.shape, target.shape)
    axes = tuple(range(1, pred.ndim))
    p = pred.astype(np.float64)
    t = target.astype(np.float64)
    tp = (p * t).sum(axis=axes)
    fp = (p * (1 - t)).sum(axis=axes)
    fn = ((1 - p) * t).sum(axis=axes)
    return tp, fp, fn


def soft_counts(pred, target) -> list[ConfusionCounts]:
    tp, fp, fn = _per_image_sums(pred, target)
    n = pred[0].size
    return [ConfusionCounts(a, b, c, n - a - b - c) for a, b, c in zip(tp, fp, fn)]


def tversky_loss(pred: np.ndarray, target: np.ndarray, params: TverskyParams = TverskyParams(),
                 check_range: bool = False) -> tuple[float, np.ndarray]:
    """Batch-mean of ``1 - TI`` per image, and its gradient w.r.t. ``pred``.

    ``TI = (TP + s) / (TP + alpha FP + beta FN + s)`` with soft counts
    ``TP = sum p t``, ``FP = sum p (1 - t)``, ``FN = sum (1 - p) t``.
    """
    if check_range and (np.any(pred < 0) or np.any(pred > 1)):
        raise ValueError("tversky_loss: predictions outside [0, 1]")
    a, b, s = params.alpha, params.beta, params.smooth
    tp, fp, fn = _per_image_sums(pred, target)
    num = tp + s
    den = tp + a * fp + b * fn + s
    ti = num / den
    loss = float(np.mean(1 - ti))

    t = target.astype(np.float64)
    shape = (-1,) + (1,) * (pred.ndim - 1)
    num_b, den_b = num.reshape(shape), den.reshape(shape)
    d_num = t
    d_den = t + a * (1 - t) - b * t
    d_ti = (d_num * den_b - num_b * d_den) / den_b ** 2
    grad = -d_ti / pred.shape[0]
    return loss, grad.astype(pred.dtype)


def soft_dice_loss(pred, target) -> float:
    tp, fp, fn = _per_image_sums(pred, target)
    return float(np.mean(1 - 2 * tp / (2 * tp + fp + fn)))


def confusion(pred_probs: np.ndarray, gt_mask: np.ndarray, threshold: float = 0.5) -> ConfusionCounts:
    """Pixel tallies after binarising ``pred_probs`` at ``threshold`` (strictly greater)."""
    if pred_probs.shape != gt_mask.shape:
        raise ShapeError("confusion", "gt_mask.shape", pred_probs.shape, gt_mask.shape)
    p = pred_probs > threshold
    g = gt_mask > 0.5
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def metrics(c: ConfusionCounts) -> MetricSet:
    """Dice, Jaccard, precision, recall; an empty denominator yields 1 when
    prediction and ground truth are both empty, otherwise 0."""
    union = c.tp + c.fp + c.fn
    if union == 0:
        return MetricSet(1.0, 1.0, 1.0, 1.0)
    dice = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    jaccard = c.tp / union
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    return MetricSet(dice, jaccard, precision, recall)


def mean_metrics(items: list[MetricSet]) -> MetricSet:
    if not items:
        raise ValueError("cannot average an empty metric list")
    arr = np.array([m.as_tuple() for m in items], dtype=np.float64)
    return MetricSet(*(float(v) for v in arr.mean(axis=0)))


def aggregate(per_image: list[MetricSet], class_labels: list[str]) -> dict[str, MetricSet]:
    """Unweighted per-class means plus an ``overall`` mean over all images."""
    if not per_image:
        raise ValueError("aggregate needs at least one image")
    if len(per_image) != len(class_labels):
        raise ValueError("one class label per image is required")
    report = {}
    for label in sorted(set(class_labels)):
        report[label] = mean_metrics([m for m, c in zip(per_image, class_labels) if c == label])
    report["overall"] = mean_metrics(per_image)
    return report


def format_report(report: dict[str, MetricSet]) -> str:
    lines = [f"{'class':<20}" + "".join(f"{n:>11}" for n in METRIC_NAMES)]
    for label, m in report.items():
        lines.append(f"{label:<20}" + "".join(f"{v:>11.4f}" for v in m.as_tuple()))
    return "\n".join(lines)


def report_csv(report: dict[str, MetricSet]) -> str:
    rows = ["class," + ",".join(METRIC_NAMES)]
    for label, m in report.items():
        rows.append(label + "," + ",".join(repr(float(v)) for v in m.as_tuple()))
    return "\n".join(rows) + "\n"
