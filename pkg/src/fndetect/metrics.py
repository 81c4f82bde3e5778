"""Precision, recall, PR curves and AP / mAP.

AP is the area under the monotone (right-to-left running max) precision
envelope over recall, i.e. all-points interpolation. The 101-point COCO
variant is available with ``method="coco101"``.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .postprocess import box_iou

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))


@dataclass
class EvalCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def n_gt(self):
        return self.tp + self.fn

    def __add__(self, other):
        return EvalCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass
class MatchResult:
    counts: dict
    tp_flags: np.ndarray
    matched_gt: np.ndarray


def match_detections(dets, gt_boxes, gt_classes, iou_thresh=0.5):
    """Greedy score-ordered matching for one image.

    Each detection (highest score first, ties by position) takes the
    still-unmatched same-class ground truth with the highest IoU, provided
    it reaches ``iou_thresh``. ``tp_flags`` is aligned with ``dets``.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    n = len(dets)
    flags = np.zeros(n, dtype=bool)
    matched_gt = np.full(n, -1)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    if n and len(gt_boxes):
        overlap = box_iou([d.box for d in dets], gt_boxes)
    order = sorted(range(n), key=lambda i: (-dets[i].score, i))
    for i in order:
        if not len(gt_boxes):
            break
        ok = (~taken) & (gt_classes == dets[i].class_id) & (overlap[i] >= iou_thresh)
        if not ok.any():
            continue
        j = int(np.argmax(np.where(ok, overlap[i], -1.0)))
        taken[j] = True
        flags[i] = True
        matched_gt[i] = j
    counts = {}
    for c in set(gt_classes.tolist()) | {d.class_id for d in dets}:
        is_c = np.array([d.class_id == c for d in dets], dtype=bool)
        tp = int(flags[is_c].sum()) if n else 0
        fp = int(is_c.sum()) - tp
        n_gt = int((gt_classes == c).sum())
        counts[c] = EvalCounts(tp, fp, n_gt - tp)
    return MatchResult(counts, flags, matched_gt)


def precision_recall(counts):
    """``(tp / (tp + fp), tp / (tp + fn))``; no predictions gives precision 1, no gts recall 0."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


@dataclass
class PRCurve:
    """One point per distinct score threshold, highest threshold first."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float

    @property
    def points(self):
        return list(zip(self.recall.tolist(), self.precision.tolist()))

    def best_f1(self):
        """``(threshold, precision, recall, f1)`` at the maximum-F1 point."""
        if len(self.thresholds) == 0:
            return 0.0, 1.0, 0.0, 0.0
        p, r = self.precision, self.recall
        with np.errstate(invalid="ignore", divide="ignore"):
            f1 = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
        i = int(np.argmax(f1))
        return float(self.thresholds[i]), float(p[i]), float(r[i]), float(f1[i])


def average_precision(scores, tp_flags, total_gts, method="all"):
    """Sweep the score threshold over all detection scores and integrate the PR curve.

    Detections sharing a score enter together. ``total_gts == 0`` gives AP 1
    with no detections and 0 otherwise.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    flags = np.asarray(tp_flags, dtype=bool).reshape(-1)
    if len(scores) != len(flags):
        raise ValueError("scores and flags differ in length")
    if total_gts == 0:
        empty = np.zeros(0)
        return PRCurve(empty, empty, empty, 1.0 if len(scores) == 0 else 0.0)
    order = np.lexsort((np.arange(len(scores)), -scores))
    s, f = scores[order], flags[order]
    tp = np.cumsum(f)
    fp = np.cumsum(~f)
    last = np.flatnonzero(np.append(s[1:] != s[:-1], True)) if len(s) else np.zeros(0, dtype=int)
    thresholds = s[last]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / total_gts
    if method == "all":
        ap = _area_all_points(recall, precision)
    elif method == "coco101":
        ap = _area_101(recall, precision)
    else:
        raise ValueError(f"unknown AP method {method!r}")
    return PRCurve(thresholds, precision, recall, float(ap))


def _area_all_points(recall, precision):
    if len(recall) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def _area_101(recall, precision):
    if len(recall) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recall, r, side="left")
        total += envelope[idx] if idx < len(recall) else 0.0
    return total / 101.0


@dataclass
class EvalSummary:
    ap50: float
    ap50_95: float
    map: float
    precision: float
    recall: float
    f1_threshold: float
    per_class: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)

    def to_text(self):
        return (
            f"ap50={self.ap50:.6f}\nap50_95={self.ap50_95:.6f}\nmap={self.map:.6f}\n"
            f"p={self.precision:.6f}\nr={self.recall:.6f}\nf1_threshold={self.f1_threshold:.6f}\n"
        )


def _gather(images, iou_thresh):
    """Per-class (scores, flags, n_gt) pooled over images."""
    pooled = {}
    for dets, gt_boxes, gt_classes in images:
        res = match_detections(dets, gt_boxes, gt_classes, iou_thresh)
        for c, cnt in res.counts.items():
            entry = pooled.setdefault(c, ([], [], 0))
            pooled[c] = (entry[0], entry[1], entry[2] + cnt.n_gt)
        for d, flag in zip(dets, res.tp_flags):
            pooled[d.class_id][0].append(d.score)
            pooled[d.class_id][1].append(bool(flag))
    return pooled


def map_over_classes_and_thresholds(images, method="all", iou_thresholds=IOU_THRESHOLDS):
    """Evaluate a set of images.

    ``images`` is an iterable of ``(detections, gt_boxes_xyxy, gt_classes)``.
    ``ap50`` and ``map`` are the class-mean AP at IoU 0.5; ``ap50_95`` is the
    class-mean AP averaged over IoU 0.50:0.05:0.95. Precision and recall are
    taken at the best-F1 threshold of the pooled 0.5 curve.
    """
    images = list(images)
    per_threshold = []
    curves_50 = {}
    for t in iou_thresholds:
        pooled = _gather(images, t)
        aps = {}
        for c, (scores, flags, n_gt) in pooled.items():
            curve = average_precision(scores, flags, n_gt, method)
            aps[c] = curve.ap
            if np.isclose(t, 0.5):
                curves_50[c] = curve
        per_threshold.append(aps)
    classes = sorted(set().union(*[set(a) for a in per_threshold])) if per_threshold else []

    def class_mean(aps):
        return float(np.mean([aps[c] for c in classes])) if classes else 1.0

    idx50 = int(np.argmin([abs(t - 0.5) for t in iou_thresholds]))
    ap50 = class_mean(per_threshold[idx50])
    ap50_95 = float(np.mean([class_mean(a) for a in per_threshold]))

    all_pooled = _gather(images, 0.5)
    scores = [s for v in all_pooled.values() for s in v[0]]
    flags = [f for v in all_pooled.values() for f in v[1]]
    n_gt = sum(v[2] for v in all_pooled.values())
    overall = average_precision(scores, flags, n_gt, method)
    thr, p, r, _ = overall.best_f1()
    if n_gt == 0 and not scores:
        p, r = 1.0, 1.0
    per_class = {c: {"ap50": per_threshold[idx50].get(c, 0.0),
                     "ap50_95": float(np.mean([a.get(c, 0.0) for a in per_threshold]))} for c in classes}
    curves = dict(curves_50)
    curves["all"] = overall
    return EvalSummary(ap50, ap50_95, ap50, p, r, thr, per_class, curves)


def write_curve_csv(path, curve):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["threshold", "precision", "recall"])
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            wr.writerow([repr(float(t)), repr(float(p)), repr(float(r))])


def read_curve_csv(path):
    t, p, r = [], [], []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        for row in rd:
            t.append(float(row["threshold"]))
            p.append(float(row["precision"]))
            r.append(float(row["recall"]))
    return np.array(t), np.array(p), np.array(r)
