"""Magnitude/random/L1 pruning, distillation loss and the weight update rules."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError, ParameterError, TrainingError
from .models import Model, ModelSpec
from .tensor import SmoothedLabel, Tensor

PRUNE_STRATEGIES = ("none", "magnitude", "random", "sparse")


@dataclass
class PruneConfig:
    strategy: str = "magnitude"
    threshold: float | None = None
    sparsity: float | None = 0.3
    l1: float = 1e-4
    finetune_epochs: int = 1
    seed: int = 1

    def __post_init__(self):
        if self.strategy not in PRUNE_STRATEGIES:
            raise ParameterError(f"unknown pruning strategy {self.strategy!r}")
        if self.threshold is not None and self.threshold < 0:
            raise ParameterError(f"threshold must be >= 0, got {self.threshold}")
        if self.sparsity is not None and not 0 <= self.sparsity < 1:
            raise ParameterError(f"sparsity must lie in [0, 1), got {self.sparsity}")
        if self.strategy in ("magnitude", "sparse") and (self.threshold is None) == (self.sparsity is None):
            raise ParameterError("set exactly one of threshold / sparsity")
        if self.strategy == "random" and self.sparsity is None:
            raise ParameterError("random pruning needs a target sparsity")
        if self.l1 < 0:
            raise ParameterError(f"l1 coefficient must be >= 0, got {self.l1}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DistillConfig:
    temperature: float = 4.0
    alpha: float = 0.5
    blend: float = 0.7
    lr: float = 0.02
    epochs: int = 30
    momentum: float = 0.9

    def __post_init__(self):
        if not self.temperature > 0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if not 0 <= self.alpha <= 1:
            raise ParameterError(f"distillation mix must lie in [0, 1], got {self.alpha}")
        _check_blend(self.blend)
        if not self.lr > 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")

    def to_dict(self) -> dict:
        return asdict(self)


class PruneMask(dict):
    """Parameter name -> boolean keep-array."""

    def apply(self, model: Model) -> None:
        for name, keep in self.items():
            model.params[name].data[~keep] = 0.0

    def sparsity(self) -> float:
        total = sum(m.size for m in self.values())
        return sum(int(np.count_nonzero(~m)) for m in self.values()) / max(total, 1)


def prunable(model: Model) -> list[str]:
    """Weight tensors subject to pruning (biases are left dense)."""
    return [n for n in model.params if not n.endswith(".b")]


def weight_sparsity(model: Model) -> float:
    names = prunable(model)
    zeros = sum(int(np.count_nonzero(model.params[n].data == 0)) for n in names)
    return zeros / sum(model.params[n].size for n in names)


# ----------------------------------------------------------------------------
# pruning


def prune_magnitude(weights, threshold: float):
    """Keep entries with |w| > threshold, zero the rest. Returns (pruned, keep-mask)."""
    if threshold < 0:
        raise ParameterError(f"threshold must be >= 0, got {threshold}")
    w = T.as_tensor(weights).data
    keep = np.abs(w) > threshold
    return Tensor(np.where(keep, w, 0.0)), keep


def _abs_weights(source) -> np.ndarray:
    if isinstance(source, Model):
        return np.concatenate([np.abs(source.params[n].data).ravel() for n in prunable(source)])
    if isinstance(source, (list, tuple)) and source and isinstance(source[0], Tensor):
        return np.concatenate([np.abs(t.data).ravel() for t in source])
    return np.abs(np.asarray(T.as_tensor(source).data)).ravel()


def threshold_for_sparsity(source, sparsity: float) -> float:
    """Smallest t with fraction(|w| <= t) >= sparsity, by a global sort."""
    if not 0 <= sparsity < 1:
        raise ParameterError(f"sparsity must lie in [0, 1), got {sparsity}")
    if sparsity == 0:
        return 0.0
    values = np.sort(_abs_weights(source))
    k = math.ceil(round(sparsity * values.size, 9))
    return float(values[k - 1])


def prune_model_magnitude(model: Model, threshold: float) -> PruneMask:
    """Apply the magnitude rule in place to every prunable tensor."""
    mask = PruneMask()
    for name in prunable(model):
        pruned, keep = prune_magnitude(model.params[name], threshold)
        model.params[name].data[...] = pruned.data
        mask[name] = keep
    return mask


def prune_random(model: Model, sparsity: float, seed: int) -> tuple[Model, PruneMask]:
    """Zero exactly floor(sparsity * n) uniformly chosen entries in every weight tensor."""
    if not 0 <= sparsity < 1:
        raise ParameterError(f"sparsity must lie in [0, 1), got {sparsity}")
    rng = np.random.default_rng(seed)
    pruned = model.copy()
    mask = PruneMask()
    for name in prunable(pruned):
        t = pruned.params[name]
        keep = np.ones(t.size, dtype=bool)
        keep[rng.choice(t.size, size=int(math.floor(sparsity * t.size)), replace=False)] = False
        keep = keep.reshape(t.shape)
        t.data[~keep] = 0.0
        mask[name] = keep
    return pruned, mask


def l1_penalty(model: Model, coeff: float) -> Tensor:
    terms = [T.tsum(T.absolute(model.params[n])) for n in prunable(model)]
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return T.mul(total, coeff)


def prune_sparse(
    model: Model,
    l1_coeff: float,
    threshold: float | None,
    finetune_steps: int,
    loss_fn: Callable[[Model, object], Tensor],
    batches: Iterable,
    lr: float = 0.01,
    momentum: float = 0.0,
    sparsity: float | None = None,
) -> tuple[Model, PruneMask]:
    """L1-regularised fine-tuning followed by magnitude pruning.

    Runs ``finetune_steps`` SGD steps on ``loss_fn + l1_coeff * sum|w|`` drawing
    batches from ``batches``, then prunes at ``threshold`` (or at the threshold
    reaching ``sparsity`` when ``threshold`` is None).
    """
    from .training import SGD

    if l1_coeff < 0:
        raise ParameterError(f"l1 coefficient must be >= 0, got {l1_coeff}")
    tuned = model.copy().requires_grad_()
    opt = SGD(tuned.parameters(), lr=lr, momentum=momentum)
    it = iter(batches)
    for step in range(finetune_steps):
        batch = next(it)
        loss = loss_fn(tuned, batch)
        if l1_coeff:
            loss = T.add(loss, l1_penalty(tuned, l1_coeff))
        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss at sparse fine-tuning step {step}", step=step)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
    tuned.requires_grad_(False)
    if threshold is None:
        if sparsity is None:
            raise ParameterError("set a threshold or a target sparsity")
        threshold = threshold_for_sparsity(tuned, sparsity)
    mask = prune_model_magnitude(tuned, threshold)
    return tuned, mask


# ----------------------------------------------------------------------------
# distillation


def _targets(target, shape) -> np.ndarray:
    if isinstance(target, SmoothedLabel):
        arr = target.distribution
    else:
        arr = np.asarray(target, dtype=np.float64)
    if arr.shape != shape:
        if arr.ndim == len(shape) - 1 and arr.shape == shape[1:]:
            arr = np.broadcast_to(arr, shape)
        else:
            raise DimensionError(f"target shape {arr.shape} does not match logits {shape}")
    if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=-1) - 1) > 1e-9):
        raise DomainError("target is not a probability distribution")
    return arr


def teacher_distribution(teacher_logits, temperature: float) -> np.ndarray:
    """softmax(teacher_logits / T) as a constant array."""
    with T.no_grad():
        return T.softmax_with_temperature(T.as_tensor(teacher_logits), temperature).data


def distill_loss(teacher_logits, student_logits, target, cfg: DistillConfig) -> Tensor:
    """alpha * KL(P_T || P_S) + (1 - alpha) * CE(softmax(student), target).

    P_T and P_S are temperature-T softmaxes; the cross-entropy uses T = 1.
    Gradients reach the student logits only. Batched logits [N, K] give the
    batch mean.
    """
    student_logits = T.as_tensor(student_logits)
    t_logits = np.asarray(T.as_tensor(teacher_logits).data)
    if t_logits.shape != student_logits.shape:
        raise DimensionError(f"teacher logits {t_logits.shape} vs student logits {student_logits.shape}")
    y = _targets(target, student_logits.shape)
    p_t = teacher_distribution(t_logits, cfg.temperature)
    scale = 1.0 / (p_t.size // p_t.shape[-1])
    safe = np.where(p_t > 0, p_t, 1.0)
    entropy_term = float(np.sum(np.where(p_t > 0, p_t * np.log(safe), 0.0))) * scale
    log_ps = T.log_softmax(student_logits, cfg.temperature)
    kl = T.add(T.mul(T.tsum(T.mul(log_ps, p_t)), -scale), entropy_term)
    ce = T.mul(T.tsum(T.mul(T.log_softmax(student_logits, 1.0), y)), -scale)
    return T.add(T.mul(kl, cfg.alpha), T.mul(ce, 1.0 - cfg.alpha))


def detection_distill_loss(teacher_grid, student_grid, ground_truth, spec: ModelSpec, cfg: DistillConfig) -> Tensor:
    """Distillation for grid detectors.

    Each (cell, box) objectness logit o is read as the two-class logit pair
    [o, 0]; class logits per cell are distilled as they are. The soft term is
    the KL summed over cells (mean over images) and the hard term is
    ``detect_loss``.
    """
    from .models import detect_loss

    student_grid = T.as_tensor(student_grid)
    t_grid = np.asarray(T.as_tensor(teacher_grid).data)
    if t_grid.ndim == 3:
        t_grid = t_grid[None]
        student_grid = T.reshape(student_grid, (1,) + student_grid.shape)
        ground_truth = [ground_truth]
    if t_grid.shape != student_grid.shape:
        raise DimensionError(f"teacher grid {t_grid.shape} vs student grid {student_grid.shape}")
    n = t_grid.shape[0]
    nb = spec.boxes_per_cell
    obj_idx = [b * 5 + 4 for b in range(nb)]
    s_obj = T.transpose(student_grid[:, obj_idx], (0, 2, 3, 1))
    s_logits = T.mul(T.reshape(s_obj, s_obj.shape + (1,)), np.array([1.0, 0.0]))
    t_obj = t_grid[:, obj_idx].transpose(0, 2, 3, 1)
    t_logits = np.stack([t_obj, np.zeros_like(t_obj)], axis=-1)
    soft = _kl_sum(t_logits, s_logits, cfg.temperature)
    if spec.num_classes > 1:
        s_cls = T.transpose(student_grid[:, nb * 5 :], (0, 2, 3, 1))
        t_cls = t_grid[:, nb * 5 :].transpose(0, 2, 3, 1)
        soft = T.add(soft, _kl_sum(t_cls, s_cls, cfg.temperature))
    soft = T.mul(soft, 1.0 / n)
    hard = detect_loss(student_grid, ground_truth, spec)
    return T.add(T.mul(soft, cfg.alpha), T.mul(hard, 1.0 - cfg.alpha))


def _kl_sum(teacher_logits: np.ndarray, student_logits: Tensor, temperature: float) -> Tensor:
    p_t = teacher_distribution(teacher_logits, temperature)
    safe = np.where(p_t > 0, p_t, 1.0)
    entropy_term = float(np.sum(np.where(p_t > 0, p_t * np.log(safe), 0.0)))
    cross = T.tsum(T.mul(T.log_softmax(student_logits, temperature), p_t))
    return T.sub(entropy_term, cross)


# ----------------------------------------------------------------------------
# update rules


def finetune_step(weights, grads, lr: float, mask: np.ndarray | None = None) -> np.ndarray:
    """w - lr * grad, with entries outside ``mask`` held at exactly 0."""
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    w = np.asarray(T.as_tensor(weights).data)
    g = np.asarray(T.as_tensor(grads).data)
    if w.shape != g.shape:
        raise DimensionError(f"weights {w.shape} and gradient {g.shape} differ in shape")
    out = w - lr * g
    if mask is not None:
        if mask.shape != w.shape:
            raise DimensionError(f"mask {mask.shape} does not match weights {w.shape}")
        out[~mask] = 0.0
    return out


def _check_blend(alpha: float) -> None:
    if not 0 <= alpha <= 1:
        raise ParameterError(f"blend factor must lie in [0, 1], got {alpha}")
    if not 0.5 <= alpha <= 0.9:
        warnings.warn(f"blend factor {alpha} outside the usual [0.5, 0.9] range", stacklevel=3)


def blend_weights(w_next, w_hat_prev, alpha: float, mask: np.ndarray | None = None) -> np.ndarray:
    """alpha * w_next + (1 - alpha) * w_hat_prev, elementwise."""
    _check_blend(alpha)
    a = np.asarray(T.as_tensor(w_next).data)
    b = np.asarray(T.as_tensor(w_hat_prev).data)
    if a.shape != b.shape:
        raise DimensionError(f"cannot blend shapes {a.shape} and {b.shape}")
    out = alpha * a + (1.0 - alpha) * b
    if mask is not None:
        out[~mask] = 0.0
    return out
