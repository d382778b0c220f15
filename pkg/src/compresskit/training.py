"""Optimisers, minibatch loops and evaluation for classifiers and detectors."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .compression import PruneMask, finetune_step
from .errors import ParameterError, TrainingError
from .metrics import ConfusionCounts, classification_metrics, detection_summary
from .models import Model, decode_grid, detect_loss, predict_grids
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.01
    lr_decay: float = 0.1
    decay_period: int = 5
    momentum: float = 0.9
    batch_size: int = 16
    smoothing: float = 0.1
    seed: int = 1
    clip_norm: float | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.decay_period < 1:
            raise ParameterError("epochs >= 0, batch_size >= 1 and decay_period >= 1 are required")
        if not self.lr > 0 or not 0 <= self.lr_decay < 1 or not 0 <= self.momentum < 1:
            raise ParameterError("invalid learning-rate / decay / momentum settings")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ParameterError("clip_norm must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(initial: float, decay: float, period: int, epoch: int) -> float:
    """Step schedule: multiply by (1 - decay) every ``period`` epochs."""
    return initial * (1.0 - decay) ** (epoch // period)


class SGD:
    """Heavy-ball SGD; each step is ``finetune_step`` applied to the velocity."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0, mask: dict | None = None,
                 names: list[str] | None = None, clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in params]
        names = names or [None] * len(params)
        mask = mask or {}
        self.masks = [mask.get(n) if n is not None else None for n in names]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad**2)) for p in self.params if p.grad is not None))

    def step(self) -> None:
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for p, v, m in zip(self.params, self.velocity, self.masks):
            if p.grad is None:
                continue
            grad = p.grad * scale if scale != 1.0 else p.grad
            if self.momentum:
                v *= self.momentum
                v += grad
                direction = v
            else:
                direction = grad
            p.data[...] = finetune_step(p.data, direction, self.lr, m)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def model_optimizer(model: Model, lr: float, momentum: float, mask: PruneMask | None = None,
                    clip_norm: float | None = None) -> SGD:
    names = list(model.params)
    return SGD([model.params[n] for n in names], lr, momentum, mask, names, clip_norm)


def classifier_loss(model: Model, images: np.ndarray, targets: np.ndarray) -> Tensor:
    logits = model.forward(Tensor._wrap(images, False))
    return T.mul(T.tsum(T.mul(T.log_softmax(logits), targets)), -1.0 / len(images))


def fit(
    model: Model,
    n: int,
    loss_fn: Callable[[Model, np.ndarray], Tensor],
    cfg: TrainConfig,
    mask: PruneMask | None = None,
    epoch_end: Callable[[int, Model], None] | None = None,
    lr: float | None = None,
    epochs: int | None = None,
) -> list[float]:
    """Minibatch SGD over ``n`` examples; returns the mean loss of each epoch.

    ``loss_fn(model, index_batch)`` builds the scalar loss for a batch of
    example indices.
    """
    epochs = cfg.epochs if epochs is None else epochs
    base_lr = cfg.lr if lr is None else lr
    rng = np.random.default_rng([cfg.seed, 0xF17])
    model.requires_grad_(True)
    opt = model_optimizer(model, base_lr, cfg.momentum, mask, cfg.clip_norm)
    history = []
    try:
        for epoch in range(epochs):
            opt.lr = learning_rate(base_lr, cfg.lr_decay, cfg.decay_period, epoch)
            total, count = 0.0, 0
            for idx in minibatches(n, cfg.batch_size, rng):
                T.active_tape().reset()
                loss = loss_fn(model, idx)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss in epoch {epoch}", epoch=epoch)
                opt.zero_grad()
                T.backward(loss)
                opt.step()
                total += value * len(idx)
                count += len(idx)
            history.append(total / max(count, 1))
            logger.info("epoch %d loss %.5f lr %.5f", epoch, history[-1], opt.lr)
            if epoch_end is not None:
                epoch_end(epoch, model)
    finally:
        model.requires_grad_(False)
        T.active_tape().reset()
    return history


def train_classifier(model: Model, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                     mask: PruneMask | None = None, epochs: int | None = None, lr: float | None = None) -> list[float]:
    targets = T.smoothed_targets(labels, model.spec.num_classes, cfg.smoothing) if len(labels) else None

    def loss_fn(m, idx):
        return classifier_loss(m, images[idx], targets[idx])

    return fit(model, len(images), loss_fn, cfg, mask, epochs=epochs, lr=lr)


def train_detector(model: Model, images: np.ndarray, boxes: list, cfg: TrainConfig,
                   mask: PruneMask | None = None, epochs: int | None = None, lr: float | None = None) -> list[float]:
    def loss_fn(m, idx):
        grid = m.forward(Tensor._wrap(images[idx], False))
        return detect_loss(grid, [boxes[i] for i in idx], m.spec)

    return fit(model, len(images), loss_fn, cfg, mask, epochs=epochs, lr=lr)


def task_loss_fn(model: Model, images: np.ndarray, labels: np.ndarray, boxes: list, smoothing: float):
    """Batch loss closure over index batches for the model's head type."""
    if model.spec.head == "classifier":
        targets = T.smoothed_targets(labels, model.spec.num_classes, smoothing)
        return lambda m, idx: classifier_loss(m, images[idx], targets[idx])
    return lambda m, idx: detect_loss(m.forward(Tensor._wrap(images[idx], False)), [boxes[i] for i in idx], m.spec)


def train_task(model: Model, images, labels, boxes, cfg: TrainConfig, mask=None, epochs=None, lr=None) -> list[float]:
    if model.spec.head == "classifier":
        return train_classifier(model, images, labels, cfg, mask, epochs, lr)
    return train_detector(model, images, boxes, cfg, mask, epochs, lr)


# ----------------------------------------------------------------------------
# evaluation


def predict_labels(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    if len(images) == 0:
        return np.zeros(0, dtype=int)
    return predict_grids(model, images, batch_size).argmax(axis=-1)


def evaluate_classifier(model: Model, images: np.ndarray, labels: np.ndarray) -> dict:
    pred = predict_labels(model, images)
    counts = ConfusionCounts.from_predictions(labels, pred, model.spec.num_classes)
    out = classification_metrics(counts)
    out.pop("per_class")
    out["n"] = int(len(labels))
    return out


def detect_all(model: Model, images: np.ndarray, score_threshold: float, iou_threshold: float = 0.5):
    if len(images) == 0:
        return []
    grids = predict_grids(model, images)
    return [decode_grid(g, model.spec, score_threshold, iou_threshold) for g in grids]


def summarize_detections(operating, ranked, boxes, num_classes: int, iou_threshold: float = 0.5) -> dict:
    """Precision/recall of the ``operating`` detections, AP/mAP of the ``ranked`` ones."""
    point = detection_summary(operating, boxes, num_classes, iou_threshold)
    curve = detection_summary(ranked, boxes, num_classes, iou_threshold)
    p, r = point["precision"], point["recall"]
    return {
        "precision": p,
        "recall": r,
        "f1": 2 * p * r / (p + r) if p + r else 0.0,
        "mAP": curve["mAP"],
        "ap": curve["ap"],
        "tp": point["tp"],
        "fp": point["fp"],
        "fn": point["fn"],
        "n": len(boxes),
    }


def evaluate_detector(model: Model, images: np.ndarray, boxes: list, iou_threshold: float = 0.5,
                      score_threshold: float = 0.5, ap_score_threshold: float = 0.01) -> dict:
    """Precision/recall at ``score_threshold``; AP/mAP over detections above ``ap_score_threshold``."""
    grids = predict_grids(model, images) if len(images) else []
    operating = [decode_grid(g, model.spec, score_threshold) for g in grids]
    ranked = [decode_grid(g, model.spec, ap_score_threshold) for g in grids]
    return summarize_detections(operating, ranked, boxes, model.spec.num_classes, iou_threshold)


def evaluate(model: Model, images, labels, boxes, iou_threshold=0.5, score_threshold=0.5, ap_score_threshold=0.01) -> dict:
    if model.spec.head == "classifier":
        return evaluate_classifier(model, images, labels)
    return evaluate_detector(model, images, boxes, iou_threshold, score_threshold, ap_score_threshold)


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    with no_grad():
        return predict_grids(model, images, batch_size)
