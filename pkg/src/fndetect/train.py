"""SGD training loop, batched inference and dataset evaluation."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .assign import GroundTruthBoxes, LossWeights, MatchingParams, detection_loss
from .data import random_augment
from .errors import NumericError
from .metrics import map_over_classes_and_thresholds
from .postprocess import decode_nms_free, decode_with_nms
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iters: int = 300
    batch: int = 8
    lr: float = 0.01
    lr_final: float = 1e-4
    momentum: float = 0.937
    weight_decay: float = 0.0
    warmup: int = 0
    max_grad_norm: float = 10.0
    seed: int = 0
    augment: bool = False
    log_every: int = 10
    val_every: int = 0
    matching: MatchingParams = field(default_factory=MatchingParams)
    weights: LossWeights = field(default_factory=LossWeights)


class SGD:
    """Heavy-ball momentum: ``v = mu * v + g``; ``p -= lr * v``."""

    def __init__(self, params, lr=0.01, momentum=0.937, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.ndim > 1:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def cosine_lr(step, total, lr0, lr_final, warmup=0):
    if warmup and step < warmup:
        return lr0 * (step + 1) / warmup
    t = (step - warmup) / max(total - warmup - 1, 1)
    return lr_final + 0.5 * (lr0 - lr_final) * (1.0 + math.cos(math.pi * min(t, 1.0)))


def make_batch(samples, dtype=None):
    images = np.concatenate([s.image for s in samples], axis=0)
    targets = [GroundTruthBoxes.from_normalized(s.gts, s.size) for s in samples]
    return Tensor(images, dtype=dtype), targets


def clip_gradients(params, max_norm):
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    val: list = field(default_factory=list)


def train(model, samples, cfg=None, val_samples=None, on_log=None):
    """Jointly optimize backbone, neck and both heads.

    Returns the per-iteration loss log. Raises :class:`NumericError` if the
    loss turns non-finite.
    """
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    result = TrainResult()
    order = []
    model.train()
    for it in range(cfg.iters):
        if len(order) < cfg.batch:
            order.extend(rng.permutation(len(samples)).tolist())
        idx, order = order[: cfg.batch], order[cfg.batch :]
        batch = [samples[i] for i in idx]
        if cfg.augment:
            batch = [random_augment(s, rng) for s in batch]
        images, targets = make_batch(batch)
        opt.lr = cosine_lr(it, cfg.iters, cfg.lr, cfg.lr_final, cfg.warmup)
        heads = model(images)
        loss, info = detection_loss(heads, targets, cfg.matching, cfg.weights)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"loss became {value} at iteration {it}")
        opt.zero_grad()
        loss.backward()
        gnorm = clip_gradients(params, cfg.max_grad_norm)
        opt.step()
        parts = info["parts"]
        result.losses.append((it, value, parts["o2m"]["cls"], parts["o2m"]["box"],
                              parts["o2o"]["cls"], parts["o2o"]["box"], gnorm, opt.lr))
        if on_log and (it % cfg.log_every == 0 or it == cfg.iters - 1):
            on_log(it, value, parts)
        if val_samples and cfg.val_every and (it + 1) % cfg.val_every == 0:
            summary = evaluate(model, val_samples)
            model.train()
            result.val.append((it, summary.ap50))
            log.info("iter %d val ap50 %.4f", it, summary.ap50)
    model.eval()
    return result


def detect(model, samples, nms_free=True, conf=0.25, iou_nms=0.45, max_dets=300, batch=16):
    """Detections per sample, via the one-to-one head (``nms_free``) or one-to-many + NMS."""
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(samples), batch):
            chunk = samples[start : start + batch]
            images = Tensor(np.concatenate([s.image for s in chunk]))
            branches = ("o2o",) if nms_free else ("o2m",)
            heads = model(images, branches=branches)
            for i, s in enumerate(chunk):
                if nms_free:
                    dets = decode_nms_free(heads, conf, max_dets, s.size, i)
                else:
                    dets = decode_with_nms(heads, conf, iou_nms, max_dets, "o2m", s.size, i)
                out.append(dets)
    return out


def evaluate(model, samples, nms_free=True, conf=0.001, iou_nms=0.45, max_dets=300, method="all"):
    dets = detect(model, samples, nms_free, conf, iou_nms, max_dets)
    images = []
    for s, d in zip(samples, dets):
        gt = GroundTruthBoxes.from_normalized(s.gts, s.size)
        images.append((d, gt.boxes, gt.classes))
    return map_over_classes_and_thresholds(images, method)
