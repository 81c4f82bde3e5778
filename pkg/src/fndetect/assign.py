"""Dual label assignment (one-to-many and one-to-one) and the training loss.

Both branches rank anchors with the same matching metric
``m = s * p**alpha * IoU**beta``. The one-to-one exponents are ``r`` times
the one-to-many ones, so for ``r > 0`` both branches rank anchors the same way.
"""

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .model import anchor_grid, decode_boxes, flatten_branch
from .ops import sigmoid_np
from .postprocess import box_iou
from .tensor import Tensor, atan, bce_with_logits, clamp_min, maximum, minimum, no_grad, take

log = logging.getLogger(__name__)

EPS = 1e-9


@dataclass
class MatchingParams:
    alpha_o2m: float = 0.5
    beta_o2m: float = 6.0
    r: float = 1.0
    topk: int = 10

    def __post_init__(self):
        if self.alpha_o2m <= 0 or self.beta_o2m <= 0 or self.r <= 0:
            raise ValueError("alpha, beta and r must be positive")
        if self.topk < 1:
            raise ValueError("topk must be >= 1")

    @property
    def alpha_o2o(self):
        return self.r * self.alpha_o2m

    @property
    def beta_o2o(self):
        return self.r * self.beta_o2m

    def exponents(self, branch):
        if branch == "o2m":
            return self.alpha_o2m, self.beta_o2m
        return self.alpha_o2o, self.beta_o2o


@dataclass
class AnchorPrediction:
    point: tuple
    stride: int
    scores: np.ndarray
    box: tuple


@dataclass
class PredictionField:
    """All anchors of one image: points ``(A, 2)``, scores ``(A, C)`` in [0, 1], xyxy boxes ``(A, 4)``."""

    points: np.ndarray
    scores: np.ndarray
    boxes: np.ndarray
    strides: np.ndarray = None

    @classmethod
    def from_anchors(cls, anchors):
        return cls(
            np.array([a.point for a in anchors], dtype=np.float64).reshape(-1, 2),
            np.array([np.atleast_1d(a.scores) for a in anchors], dtype=np.float64),
            np.array([a.box for a in anchors], dtype=np.float64).reshape(-1, 4),
            np.array([a.stride for a in anchors], dtype=np.float64),
        )

    def __len__(self):
        return len(self.points)


@dataclass
class GroundTruthBoxes:
    """Pixel xyxy boxes ``(G, 4)`` with integer classes ``(G,)``."""

    boxes: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)

    def __len__(self):
        return len(self.boxes)

    @classmethod
    def from_normalized(cls, gts, image_size):
        """Build from :class:`~fndetect.data.GroundTruth` objects (normalized cx, cy, w, h)."""
        h, w = image_size
        boxes = [
            ((g.cx - g.w / 2) * w, (g.cy - g.h / 2) * h, (g.cx + g.w / 2) * w, (g.cy + g.h / 2) * h)
            for g in gts
        ]
        return cls(np.array(boxes).reshape(-1, 4), [g.class_id for g in gts])


@dataclass
class AssignmentResult:
    """Per-anchor assignment for one branch.

    ``gt_index[a]`` is the matched ground truth or -1; ``metric`` and
    ``target`` are zero for unassigned anchors.
    """

    branch: str
    gt_index: np.ndarray
    metric: np.ndarray
    target: np.ndarray
    iou: np.ndarray

    @property
    def positives(self):
        return np.flatnonzero(self.gt_index >= 0)

    def anchors_of(self, g):
        return np.flatnonzero(self.gt_index == g)

    def rows(self):
        for a in self.positives:
            yield int(a), int(self.gt_index[a]), float(self.metric[a]), self.branch


def inside_mask(points, gt_boxes):
    """``(G, A)`` spatial prior: anchor point strictly inside the gt box."""
    px, py = points[None, :, 0], points[None, :, 1]
    b = gt_boxes[:, None, :]
    margin = np.minimum(np.minimum(px - b[..., 0], py - b[..., 1]), np.minimum(b[..., 2] - px, b[..., 3] - py))
    return margin > EPS


def matching_metric(pred, gt, alpha, beta):
    """``s * p**alpha * IoU**beta`` for one anchor and one ground truth.

    ``pred`` is an :class:`AnchorPrediction`; ``gt`` is ``(box_xyxy, class_id)``.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    gt_box, cls = gt
    x, y = pred.point
    inside = gt_box[0] < x < gt_box[2] and gt_box[1] < y < gt_box[3]
    if not inside:
        return 0.0
    p = float(np.atleast_1d(pred.scores)[cls])
    overlap = float(box_iou([pred.box], [gt_box])[0, 0])
    return p ** alpha * overlap ** beta


def metric_matrix(field, gts, alpha, beta):
    """Returns ``(m, iou, inside)``, each ``(G, A)``."""
    if len(gts) == 0:
        empty = np.zeros((0, len(field)))
        return empty, empty, empty.astype(bool)
    overlap = box_iou(gts.boxes, field.boxes)
    inside = inside_mask(field.points, gts.boxes)
    p = field.scores[:, gts.classes].T
    m = np.where(inside, p ** alpha * overlap ** beta, 0.0)
    return m, overlap, inside


def _ranked_candidates(m_row, inside_row):
    cand = np.flatnonzero(inside_row)
    # descending metric, ascending anchor index on ties
    return cand[np.lexsort((cand, -m_row[cand]))]


def _normalize_targets(gt_index, m, overlap, n_gt):
    metric = np.zeros(len(gt_index))
    target = np.zeros(len(gt_index))
    ious = np.zeros(len(gt_index))
    for g in range(n_gt):
        sel = np.flatnonzero(gt_index == g)
        if len(sel) == 0:
            continue
        mg, ig = m[g, sel], overlap[g, sel]
        metric[sel] = mg
        ious[sel] = ig
        target[sel] = mg / (mg.max() + EPS) * ig.max()
    return metric, target, ious


def assign_o2m(field, gts, params, alpha=None, beta=None):
    """Top-k anchors per ground truth by metric; contested anchors go to the larger metric.

    Targets are the metric rescaled so each gt's best positive gets that gt's best IoU.
    """
    alpha = params.alpha_o2m if alpha is None else alpha
    beta = params.beta_o2m if beta is None else beta
    n_anchor = len(field)
    m, overlap, inside = metric_matrix(field, gts, alpha, beta)
    best_m = np.full(n_anchor, -1.0)
    gt_index = np.full(n_anchor, -1, dtype=np.int64)
    for g in range(len(gts)):
        chosen = _ranked_candidates(m[g], inside[g])[: params.topk]
        if len(chosen) == 0:
            log.debug("ground truth %d has no anchor inside it", g)
            continue
        # strict '>' keeps the lower gt index on ties
        take_over = m[g, chosen] > best_m[chosen]
        gt_index[chosen[take_over]] = g
        best_m[chosen[take_over]] = m[g, chosen[take_over]]
    metric, target, ious = _normalize_targets(gt_index, m, overlap, len(gts))
    return AssignmentResult("o2m", gt_index, metric, target, ious)


def assign_o2o(field, gts, params, alpha=None, beta=None):
    """Exactly one anchor per ground truth (where any anchor lies inside it).

    Each gt proposes its best remaining anchor; an anchor wanted by several
    gts keeps the larger metric (lower gt index on ties) and the loser moves
    on to its next-best anchor.
    """
    alpha = params.alpha_o2o if alpha is None else alpha
    beta = params.beta_o2o if beta is None else beta
    n_anchor = len(field)
    m, overlap, inside = metric_matrix(field, gts, alpha, beta)
    prefs = [_ranked_candidates(m[g], inside[g]) for g in range(len(gts))]
    cursor = [0] * len(gts)
    holder = {}
    free = list(range(len(gts)))
    while free:
        g = free.pop(0)
        if cursor[g] >= len(prefs[g]):
            continue
        a = int(prefs[g][cursor[g]])
        cursor[g] += 1
        rival = holder.get(a)
        if rival is None:
            holder[a] = g
        elif m[g, a] > m[rival, a] or (m[g, a] == m[rival, a] and g < rival):
            holder[a] = g
            free.append(rival)
        else:
            free.append(g)
    gt_index = np.full(n_anchor, -1, dtype=np.int64)
    for a, g in holder.items():
        gt_index[a] = g
    metric, target, ious = _normalize_targets(gt_index, m, overlap, len(gts))
    return AssignmentResult("o2o", gt_index, metric, target, ious)


def assign(field, gts, params, branch):
    return assign_o2m(field, gts, params) if branch == "o2m" else assign_o2o(field, gts, params)


def supervision_gap(result_o2m, result_o2o, i, gt=None):
    """``t_o2o[i] - [i in Omega] * t_o2m[i] + sum_{k in Omega, k != i} t_o2m[k]``.

    ``Omega`` is the one-to-many positive set of ground truth ``gt`` (by
    default the gt that anchor ``i`` is matched to). Diagnostic only.
    """
    if gt is None:
        gt = result_o2o.gt_index[i] if result_o2o.gt_index[i] >= 0 else result_o2m.gt_index[i]
    omega = set(result_o2m.anchors_of(gt).tolist()) if gt >= 0 else set()
    in_omega = 1.0 if i in omega else 0.0
    rest = sum(result_o2m.target[k] for k in omega if k != i)
    return float(result_o2o.target[i] - in_omega * result_o2m.target[i] + rest)


def write_assignment_csv(path, results):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["anchor", "gt", "m", "branch"])
        for res in results:
            for row in res.rows():
                wr.writerow(row)


# -- loss -------------------------------------------------------------------------

@dataclass
class LossWeights:
    box: float = 5.0
    cls: float = 1.0


def ciou(pred, target, eps=1e-7):
    """Complete IoU between ``(P, 4)`` xyxy :class:`Tensor` boxes and constant targets."""
    t = Tensor(target)
    iw = clamp_min(minimum(pred[:, 2], t[:, 2]) - maximum(pred[:, 0], t[:, 0]), 0.0)
    ih = clamp_min(minimum(pred[:, 3], t[:, 3]) - maximum(pred[:, 1], t[:, 1]), 0.0)
    inter = iw * ih
    pw = pred[:, 2] - pred[:, 0]
    ph = pred[:, 3] - pred[:, 1]
    tw = t[:, 2] - t[:, 0]
    th = t[:, 3] - t[:, 1]
    union = pw * ph + tw * th - inter + eps
    overlap = inter / union
    cw = maximum(pred[:, 2], t[:, 2]) - minimum(pred[:, 0], t[:, 0])
    ch = maximum(pred[:, 3], t[:, 3]) - minimum(pred[:, 1], t[:, 1])
    diag = cw * cw + ch * ch + eps
    dx = (pred[:, 0] + pred[:, 2]) - (t[:, 0] + t[:, 2])
    dy = (pred[:, 1] + pred[:, 3]) - (t[:, 1] + t[:, 3])
    rho = (dx * dx + dy * dy) * 0.25
    v = (atan(tw / (th + eps)) - atan(pw / (ph + eps))) ** 2 * (4.0 / np.pi ** 2)
    alpha = v / (v - overlap + (1.0 + eps))
    return overlap - rho / diag - alpha * v


def predictions_for_image(cls_np, boxes_np, points, strides):
    return PredictionField(points, sigmoid_np(cls_np), boxes_np, strides)


def detection_loss(heads, targets, params=None, weights=None, image_size=None, assignments=None):
    """Sum over branches of BCE classification plus ``weights.box * (1 - CIoU)``.

    ``targets`` holds one :class:`GroundTruthBoxes` per image. Assignments are
    computed from detached predictions unless passed in (as returned in
    ``info["assignments"]``), in which case they are treated as constants.
    Returns ``(loss, info)``.
    """
    params = params or MatchingParams()
    weights = weights or LossWeights()
    total = None
    info = {"assignments": {}, "parts": {}}
    for branch in ("o2m", "o2o"):
        pairs = heads.o2m if branch == "o2m" else heads.o2o
        if pairs is None:
            continue
        cls, raw = flatten_branch(pairs)
        n, n_anchor, n_cls = cls.shape
        if image_size is None:
            image_size = (pairs[0][0].shape[2] * heads.strides[0], pairs[0][0].shape[3] * heads.strides[0])
        points, strides = anchor_grid(heads.strides, *image_size)
        boxes = decode_boxes(raw, points, strides)

        if assignments is not None:
            results = assignments[branch]
        else:
            results = []
            with no_grad():
                for b in range(n):
                    field = predictions_for_image(cls.data[b], boxes.data[b], points, strides)
                    results.append(assign(field, targets[b], params, branch))
        info["assignments"][branch] = results

        cls_target = np.zeros(cls.shape, dtype=cls.dtype)
        pos_b, pos_a, gt_boxes = [], [], []
        for b, res in enumerate(results):
            pos = res.positives
            if len(pos) == 0:
                continue
            g = res.gt_index[pos]
            cls_target[b, pos, targets[b].classes[g]] = res.target[pos]
            pos_b.append(np.full(len(pos), b))
            pos_a.append(pos)
            gt_boxes.append(targets[b].boxes[g])
        norm = max(float(cls_target.sum()), 1.0)
        cls_loss = bce_with_logits(cls, cls_target).sum() * (weights.cls / norm)
        loss = cls_loss
        box_val = 0.0
        if pos_b:
            pb, pa = np.concatenate(pos_b), np.concatenate(pos_a)
            pred = take(boxes, (pb, pa))
            box_loss = (1.0 - ciou(pred, np.concatenate(gt_boxes))).sum() * (weights.box / len(pb))
            loss = loss + box_loss
            box_val = box_loss.item()
        info["parts"][branch] = {"cls": cls_loss.item(), "box": box_val}
        total = loss if total is None else total + loss
    return total, info
