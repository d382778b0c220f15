"""Classification and detection metrics, plus the FPS timing harness."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, EvaluationError, MeasurementError


@dataclass
class ConfusionCounts:
    """One-vs-rest counts per class; each row sums to the number of samples."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes: int) -> "ConfusionCounts":
        y_true = np.asarray(y_true, dtype=int)
        y_pred = np.asarray(y_pred, dtype=int)
        tp, fp, fn, tn = (np.zeros(num_classes, dtype=int) for _ in range(4))
        for c in range(num_classes):
            t, p = y_true == c, y_pred == c
            tp[c] = np.sum(t & p)
            fp[c] = np.sum(~t & p)
            fn[c] = np.sum(t & ~p)
            tn[c] = np.sum(~t & ~p)
        return cls(tp, fp, fn, tn)

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])


def _ratio(num: float, den: float, flags: list, name: str) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def classification_metrics(tp, fp=None, fn=None, tn=None) -> dict:
    """Precision, recall, accuracy and F1 from counts.

    Accepts a ConfusionCounts (metrics are macro-averaged over classes) or four
    scalar counts. Empty denominators give 0 and are listed under ``flags``.
    """
    if isinstance(tp, ConfusionCounts):
        counts = tp
        per_class = [
            classification_metrics(int(counts.tp[c]), int(counts.fp[c]), int(counts.fn[c]), int(counts.tn[c]))
            for c in range(len(counts.tp))
        ]
        out = {k: float(np.mean([m[k] for m in per_class])) for k in ("precision", "recall", "f1")}
        correct = int(np.sum(counts.tp))
        out["accuracy"] = correct / counts.total if counts.total else 0.0
        out["flags"] = sorted({f"class{c}:{f}" for c, m in enumerate(per_class) for f in m["flags"]})
        out["per_class"] = per_class
        return out
    flags: list[str] = []
    precision = _ratio(tp, tp + fp, flags, "precision")
    recall = _ratio(tp, tp + fn, flags, "recall")
    accuracy = _ratio(tp + tn, tp + fp + fn + tn, flags, "accuracy")
    f1 = _ratio(2 * precision * recall, precision + recall, flags, "f1")
    return {"precision": precision, "recall": recall, "accuracy": accuracy, "f1": f1, "flags": flags}


# ----------------------------------------------------------------------------
# detection


def _box(b):
    return b.box if hasattr(b, "box") else tuple(b)


def iou(a, b) -> float:
    """Intersection over union of two (x_min, y_min, x_max, y_max) boxes."""
    a, b = _box(a), _box(b)
    for box in (a, b):
        if not (box[0] < box[2] and box[1] < box[3]):
            raise DataError(f"degenerate box {box}")
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


@dataclass
class PrCurve:
    recall: list = field(default_factory=list)
    precision: list = field(default_factory=list)
    num_ground_truth: int = 0


def _per_image(items) -> list[list]:
    items = list(items)
    if not items:
        return [[]]
    if isinstance(items[0], (list, tuple)):
        return [list(x) for x in items]
    return [items]


def match_detections(predictions, ground_truth, iou_threshold: float = 0.5):
    """Greedy score-ordered matching within each image.

    Returns (flags, scores, n_gt): a TP/FP flag per prediction in descending
    score order. Each ground-truth box is usable once; a prediction takes the
    unmatched box of highest IoU, provided that IoU >= ``iou_threshold``.
    """
    preds = _per_image(predictions)
    gts = _per_image(ground_truth)
    if len(preds) != len(gts):
        raise EvaluationError(f"{len(preds)} prediction images vs {len(gts)} ground-truth images")
    ranked = [(d.score, img, j) for img, ds in enumerate(preds) for j, d in enumerate(ds)]
    ranked.sort(key=lambda r: -r[0])
    used = [[False] * len(g) for g in gts]
    flags, scores = [], []
    for score, img, j in ranked:
        det = preds[img][j]
        best, best_iou = -1, iou_threshold
        for k, g in enumerate(gts[img]):
            if used[img][k] or g.class_id != det.class_id:
                continue
            overlap = iou(det.box, g.box)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = k, overlap
        if best >= 0:
            used[img][best] = True
        flags.append(best >= 0)
        scores.append(score)
    return flags, scores, sum(len(g) for g in gts)


def pr_curve(flags: Sequence[bool], num_ground_truth: int) -> PrCurve:
    curve = PrCurve(num_ground_truth=num_ground_truth)
    tp = 0
    for k, hit in enumerate(flags, start=1):
        tp += bool(hit)
        curve.recall.append(tp / num_ground_truth)
        curve.precision.append(tp / k)
    return curve


def envelope_area(curve: PrCurve) -> float:
    """All-point interpolated area under the monotone precision envelope."""
    if not curve.recall:
        return 0.0
    rec = np.concatenate([[0.0], curve.recall])
    prec = np.concatenate([curve.precision, [0.0]])
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    return float(np.sum((rec[1:] - rec[:-1]) * prec[:-1]))


def average_precision(predictions, ground_truth, iou_threshold: float = 0.5, class_id: int | None = None) -> float:
    """AP of one class; NaN when that class has no ground truth.

    ``predictions``/``ground_truth`` are lists of Detection for a single image
    or lists of such lists, one per image.
    """
    preds = _per_image(predictions)
    gts = _per_image(ground_truth)
    if class_id is not None:
        preds = [[d for d in ds if d.class_id == class_id] for ds in preds]
        gts = [[g for g in gs if g.class_id == class_id] for gs in gts]
    flags, _, n_gt = match_detections(preds, gts, iou_threshold)
    if n_gt == 0:
        return math.nan
    return envelope_area(pr_curve(flags, n_gt))


def mean_average_precision(per_class_ap) -> float:
    """Mean over classes with defined (non-NaN) AP."""
    values = list(per_class_ap.values()) if isinstance(per_class_ap, dict) else list(per_class_ap)
    defined = [v for v in values if not math.isnan(v)]
    if not defined:
        raise EvaluationError("no class has a defined average precision")
    return float(sum(defined) / len(defined))


def detection_summary(predictions, ground_truth, num_classes: int, iou_threshold: float = 0.5) -> dict:
    """Precision/recall at the given operating point plus per-class AP and mAP."""
    preds = _per_image(predictions)
    gts = _per_image(ground_truth)
    flags, _, n_gt = match_detections(preds, gts, iou_threshold)
    tp = sum(flags)
    aps = {c: average_precision(preds, gts, iou_threshold, class_id=c) for c in range(num_classes)}
    try:
        m_ap = mean_average_precision(aps)
    except EvaluationError:
        m_ap = math.nan
    return {
        "precision": tp / len(flags) if flags else 0.0,
        "recall": tp / n_gt if n_gt else 0.0,
        "mAP": m_ap,
        "ap": {str(c): v for c, v in aps.items()},
        "tp": tp,
        "fp": len(flags) - tp,
        "fn": n_gt - tp,
    }


# ----------------------------------------------------------------------------
# throughput


def fps_from_timing(images: int, seconds: float) -> float:
    if seconds <= 0:
        raise MeasurementError(f"non-positive elapsed time {seconds}")
    return images / seconds


@dataclass
class FpsResult:
    fps: float
    runs: list
    n_iters: int
    batch_size: int


def bench_fps(
    forward: Callable[[np.ndarray], object],
    images: np.ndarray,
    n_iters: int = 50,
    warmup: int = 5,
    repeats: int = 5,
    timer: Callable[[], float] = time.perf_counter,
) -> FpsResult:
    """Median frames/s over ``repeats`` timed runs of ``n_iters`` forward passes.

    ``images`` is one batch; its leading dimension is the batch size. Warm-up
    passes are not timed. BLAS is pinned to one thread for the duration.
    """
    from threadpoolctl import threadpool_limits

    if n_iters < 1:
        raise MeasurementError(f"n_iters must be >= 1, got {n_iters}")
    batch = int(images.shape[0])
    runs = []
    with threadpool_limits(1):
        for _ in range(warmup):
            forward(images)
        for _ in range(repeats):
            start = timer()
            for _ in range(n_iters):
                forward(images)
            runs.append(fps_from_timing(n_iters * batch, timer() - start))
    return FpsResult(statistics.median(runs), runs, n_iters, batch)
