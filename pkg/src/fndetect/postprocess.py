"""Box geometry, greedy NMS and head-output decoding."""

import csv
from dataclasses import dataclass

import numpy as np

from .model import anchor_grid, decode_boxes_np
from .ops import sigmoid_np
from .tensor import Tensor


@dataclass(frozen=True)
class Detection:
    """Absolute-pixel ``(x1, y1, x2, y2)`` box with score and class."""

    box: tuple
    score: float
    class_id: int = 0
    index: int = -1  # source anchor, used for deterministic tie-breaks

    @property
    def area(self):
        x1, y1, x2, y2 = self.box
        return max(x2 - x1, 0.0) * max(y2 - y1, 0.0)


def iou(a, b):
    """Intersection over union of two xyxy boxes."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def box_iou(a, b):
    """Pairwise IoU matrix between ``(N, 4)`` and ``(M, 4)`` xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def _order(dets):
    """Indices sorted by score descending; ties by lower anchor index, then position."""
    keyed = [(-d.score, d.index if d.index >= 0 else i, i) for i, d in enumerate(dets)]
    return [k[2] for k in sorted(keyed)]


def nms_indices(dets, iou_thresh=0.45, class_aware=True):
    """Greedy suppression; returns surviving positions into ``dets``."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    if not dets:
        return []
    order = _order(dets)
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets])
    overlap = box_iou(boxes, boxes)
    alive = np.ones(len(dets), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        alive[i] = False
        hit = overlap[i] > iou_thresh
        if class_aware:
            hit &= classes == classes[i]
        alive &= ~hit
    return keep


def nms(dets, iou_thresh=0.45, class_aware=True):
    """Keep the best box, drop everything overlapping it above ``iou_thresh``, repeat.

    Output is sorted by descending score.
    """
    return [dets[i] for i in nms_indices(list(dets), iou_thresh, class_aware)]


def _branch_arrays(pairs, image_index=0):
    cls, box = [], []
    for c, b in pairs:
        c = c.data if isinstance(c, Tensor) else np.asarray(c)
        b = b.data if isinstance(b, Tensor) else np.asarray(b)
        n, nc, h, w = c.shape
        cls.append(c[image_index].reshape(nc, h * w).T)
        box.append(b[image_index].reshape(4, h * w).T)
    return np.concatenate(cls).astype(np.float64), np.concatenate(box).astype(np.float64)


def decode_branch(pairs, strides, image_size, image_index=0):
    """Per-anchor ``(scores (A, C), boxes (A, 4))`` for one image, boxes clamped to the frame."""
    h, w = image_size
    logits, raw = _branch_arrays(pairs, image_index)
    points, anchor_strides = anchor_grid(strides, h, w)
    boxes = decode_boxes_np(raw, points, anchor_strides)
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, w)
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, h)
    return sigmoid_np(logits), boxes


def _topk_detections(scores, boxes, score_thresh, max_dets):
    a_idx, c_idx = np.nonzero(scores > score_thresh)
    vals = scores[a_idx, c_idx]
    flat = a_idx * scores.shape[1] + c_idx
    order = np.lexsort((flat, -vals))[:max_dets]
    return [
        Detection(tuple(float(v) for v in boxes[a_idx[i]]), float(vals[i]), int(c_idx[i]), int(a_idx[i]))
        for i in order
    ]


def decode_nms_free(heads, score_thresh=0.25, max_dets=300, image_size=None, image_index=0):
    """One-to-one branch: threshold and keep the top ``max_dets``; no suppression."""
    image_size = image_size or _infer_size(heads.o2o, heads.strides)
    scores, boxes = decode_branch(heads.o2o, heads.strides, image_size, image_index)
    return _topk_detections(scores, boxes, score_thresh, max_dets)


def decode_with_nms(heads, score_thresh=0.25, iou_thresh=0.45, max_dets=300, branch="o2m",
                    image_size=None, image_index=0, class_aware=True):
    """Classic path: threshold, greedy NMS, keep the top ``max_dets``."""
    pairs = heads.branch(branch)
    image_size = image_size or _infer_size(pairs, heads.strides)
    scores, boxes = decode_branch(pairs, heads.strides, image_size, image_index)
    cands = _topk_detections(scores, boxes, score_thresh, 30000)
    return nms(cands, iou_thresh, class_aware)[:max_dets]


def _infer_size(pairs, strides):
    c, _ = pairs[0]
    return c.shape[2] * strides[0], c.shape[3] * strides[0]


# -- export ---------------------------------------------------------------------

def write_detections_csv(path, dets):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["class", "score", "x1", "y1", "x2", "y2"])
        for d in dets:
            wr.writerow([d.class_id, repr(d.score)] + [repr(float(v)) for v in d.box])


def read_detections_csv(path):
    out = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None:
            return out
        for i, row in enumerate(rd):
            if not row:
                continue
            cls, score, *box = row
            out.append(Detection(tuple(float(v) for v in box), float(score), int(cls), i))
    return out


def write_detections_yolo(path, dets, image_size):
    """Normalized ``class cx cy w h score`` lines."""
    h, w = image_size
    with open(path, "w") as fh:
        for d in dets:
            x1, y1, x2, y2 = d.box
            fh.write(
                f"{d.class_id} {(x1 + x2) / 2 / w:.6f} {(y1 + y2) / 2 / h:.6f} "
                f"{(x2 - x1) / w:.6f} {(y2 - y1) / h:.6f} {d.score:.6f}\n"
            )
