"""Pruning strategies and the prune -> distil -> blend compression pipeline."""

from __future__ import annotations

import logging
import math
import time

import numpy as np

from . import tensor as T
from .compression import (
    DistillConfig,
    PruneConfig,
    PruneMask,
    blend_weights,
    detection_distill_loss,
    distill_loss,
    prune_model_magnitude,
    prune_random,
    prune_sparse,
    threshold_for_sparsity,
    weight_sparsity,
)
from .errors import ConfigError
from .models import Model, ModelSpec, build, parameter_count, predict_grids
from .report import ExperimentReport
from .tensor import Tensor
from .training import TrainConfig, fit, minibatches, task_loss_fn

logger = logging.getLogger(__name__)


def prune_model(model: Model, cfg: PruneConfig, train: tuple, train_cfg: TrainConfig) -> tuple[Model, PruneMask]:
    """Pruned copy of ``model`` per ``cfg``; the original is left untouched.

    ``train`` is (images, labels, boxes). Magnitude and random pruning are
    followed by ``cfg.finetune_epochs`` of masked fine-tuning; sparse pruning
    runs the same number of epochs with the L1 penalty before pruning.
    """
    images, labels, boxes = train
    loss_fn = task_loss_fn(model, images, labels, boxes, train_cfg.smoothing)
    if cfg.strategy == "none":
        return model.copy(), PruneMask()
    if cfg.strategy == "sparse":
        steps_per_epoch = math.ceil(len(images) / train_cfg.batch_size)
        rng = np.random.default_rng([cfg.seed, 0x5A])

        def batches():
            while True:
                yield from minibatches(len(images), train_cfg.batch_size, rng)

        return prune_sparse(model, cfg.l1, cfg.threshold, cfg.finetune_epochs * steps_per_epoch, loss_fn,
                            batches(), lr=train_cfg.lr, momentum=train_cfg.momentum, sparsity=cfg.sparsity)
    if cfg.strategy == "magnitude":
        pruned = model.copy()
        t = cfg.threshold if cfg.threshold is not None else threshold_for_sparsity(pruned, cfg.sparsity)
        mask = prune_model_magnitude(pruned, t)
    else:
        pruned, mask = prune_random(model, cfg.sparsity, cfg.seed)
    if cfg.finetune_epochs:
        fit(pruned, len(images), loss_fn, train_cfg, mask=mask, epochs=cfg.finetune_epochs)
    return pruned, mask


def distill(teacher: Model, student: Model, cfg: DistillConfig, train: tuple, train_cfg: TrainConfig,
            history: list | None = None) -> Model:
    """Train ``student`` against ``teacher`` in place and return it.

    Every minibatch takes an SGD step on the distillation loss; after each
    epoch the blended weights are updated as
    ``w_hat <- blend * w + (1 - blend) * w_hat`` starting from the student's
    initialisation. SGD keeps running on the raw weights and the blended
    weights become the final student.
    """
    images, labels, boxes = train
    with T.no_grad():
        teacher_out = predict_grids(teacher, images) if len(images) else None
    if student.spec.head == "classifier":
        targets = T.smoothed_targets(labels, student.spec.num_classes, train_cfg.smoothing)

        def loss_fn(m, idx):
            logits = m.forward(Tensor._wrap(images[idx], False))
            return distill_loss(teacher_out[idx], logits, targets[idx], cfg)
    else:
        def loss_fn(m, idx):
            grid = m.forward(Tensor._wrap(images[idx], False))
            return detection_distill_loss(teacher_out[idx], grid, [boxes[i] for i in idx], student.spec, cfg)

    blended = {n: p.data.copy() for n, p in student.params.items()}

    def blend(epoch, m):
        for n, p in m.params.items():
            blended[n] = blend_weights(p.data, blended[n], cfg.blend)

    step_cfg = TrainConfig(epochs=cfg.epochs, lr=cfg.lr, lr_decay=train_cfg.lr_decay,
                           decay_period=train_cfg.decay_period, momentum=cfg.momentum,
                           batch_size=train_cfg.batch_size, smoothing=train_cfg.smoothing, seed=train_cfg.seed,
                           clip_norm=train_cfg.clip_norm)
    losses = fit(student, len(images), loss_fn, step_cfg, epoch_end=blend)
    if history is not None:
        history.extend(losses)
    student.load_state(blended)
    return student


def distillation_pruning_pipeline(
    base_model: Model,
    student_arch: ModelSpec,
    prune_cfg: PruneConfig,
    distill_cfg: DistillConfig,
    data: tuple,
    train_cfg: TrainConfig | None = None,
    seed: int = 1,
) -> tuple[Model, ExperimentReport]:
    """Prune the base model, then distil the pruned model into a fresh student.

    ``data`` is the training triple (images, labels, boxes). The pruned model
    serves as the teacher; the student has the ``student_arch`` layout and
    must have fewer parameters than the teacher.
    """
    start = time.perf_counter()
    train_cfg = train_cfg or TrainConfig(seed=seed)
    if student_arch.head != base_model.spec.head or student_arch.num_classes != base_model.spec.num_classes:
        raise ConfigError("student and teacher must share head type and class count")
    teacher_params = parameter_count(base_model.spec)
    student_params = parameter_count(student_arch)
    if student_params >= teacher_params:
        raise ConfigError(f"student ({student_params} parameters) is not smaller than teacher ({teacher_params})")
    teacher, mask = prune_model(base_model, prune_cfg, data, train_cfg)
    student = build(student_arch, seed)
    history: list[float] = []
    distill(teacher, student, distill_cfg, data, train_cfg, history)
    report = ExperimentReport(
        seed=seed,
        parameters={"teacher": teacher_params, "student": student_params,
                    "ratio": student_params / teacher_params},
        sparsity={"teacher": weight_sparsity(teacher), "student": weight_sparsity(student)},
        wall_clock=time.perf_counter() - start,
        extra={"distill_loss": history, "prune": prune_cfg.to_dict(), "distill": distill_cfg.to_dict()},
    )
    return student, report
