"""Cross-entropy, self-distillation KL and the summed multi-exit objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericalError
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    label_smoothing: float = 0.0
    temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ContractError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")


def _targets(labels, num_classes: int, smoothing: float) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ContractError(f"labels must be integers in [0, {num_classes})")
    target = np.full((labels.size, num_classes), smoothing / num_classes)
    target[np.arange(labels.size), labels] += 1.0 - smoothing
    return target


def cross_entropy(logits: Tensor, labels, label_smoothing: float = 0.0) -> Tensor:
    """Batch mean of ``-sum_c target_c log softmax(logits)_c``.

    With smoothing ``s`` the target is ``(1 - s) * onehot + s / C``.
    """
    B, C = logits.shape
    target = _targets(labels, C, label_smoothing)
    if target.shape[0] != B:
        raise ContractError(f"{target.shape[0]} labels for a batch of {B}")
    logp = T.log_softmax(logits, axis=-1)
    return T.neg(T.tsum(T.mul(logp, Tensor(target)))) / B


def kl_soft(student_logits: Tensor, teacher_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Batch mean of KL(teacher || student) over softened class probabilities.

    The teacher is detached: no gradient reaches whatever produced it.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ContractError(f"student {student_logits.shape} and teacher {teacher_logits.shape} differ")
    if np.isnan(student_logits.data).any() or np.isnan(teacher_logits.data).any():
        raise NumericalError("NaN logits in kl_soft")
    teacher = teacher_logits.detach()
    if temperature != 1.0:
        student_logits = T.mul(student_logits, 1.0 / temperature)
        teacher = T.mul(teacher, 1.0 / temperature)
    log_pt = T.log_softmax(teacher, axis=-1)
    log_ps = T.log_softmax(student_logits, axis=-1)
    pt = Tensor(np.exp(log_pt.data))
    return T.tsum(T.mul(pt, T.sub(log_pt, log_ps))) / student_logits.shape[0]


def total_loss(logits: dict[int, Tensor], labels, weights: LossWeights = LossWeights()) -> Tensor:
    """``sum_{k<K} [alpha CE_k + (1 - alpha) KL(exit_k || exit_K)] + CE_K``."""
    if not logits:
        raise ContractError("no exits to train")
    exits = sorted(logits)
    last = logits[exits[-1]]
    loss = cross_entropy(last, labels, weights.label_smoothing)
    for k in exits[:-1]:
        ce = cross_entropy(logits[k], labels, weights.label_smoothing)
        kd = kl_soft(logits[k], last, weights.temperature)
        loss = loss + (weights.alpha * ce + (1.0 - weights.alpha) * kd)
    return loss
