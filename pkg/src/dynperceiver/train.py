"""End-to-end training with self-distillation across exits."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence, TextIO

import numpy as np

from .checkpoint import save_checkpoint
from .data import Dataset
from .errors import ContractError
from .losses import LossWeights, total_loss
from .model import DynPerceiver
from .optim import OptimizerState, cosine_lr, optimizer_step
from .tensor import Tensor, no_grad

DEFAULT_WEIGHTS = LossWeights(alpha=0.5, label_smoothing=0.1)


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    warmup_epochs: float = 2.0
    weight_decay: float = 0.05
    min_lr: float = 0.0
    eval_batch_size: int = 100

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch sizes >= 1")
        if self.lr < 0 or self.warmup_epochs < 0 or self.weight_decay < 0:
            raise ContractError("lr, warmup and weight decay must be non-negative")


def exit_accuracies(model: DynPerceiver, images: np.ndarray, labels: np.ndarray,
                    batch_size: int = 100) -> dict[int, float]:
    """Accuracy of every exit when all of them are evaluated."""
    if len(labels) == 0:
        return {k: float("nan") for k in model.exits}
    hits = {k: 0 for k in model.exits}
    with no_grad():
        for s in range(0, len(labels), batch_size):
            out = model(Tensor(images[s:s + batch_size]))
            for k in model.exits:
                hits[k] += int(np.sum(np.argmax(out.logits[k].data, axis=1) == labels[s:s + batch_size]))
    return {k: hits[k] / len(labels) for k in model.exits}


def train(model: DynPerceiver, dataset: Dataset, epochs: int | None = None, batch_size: int | None = None,
          weights: LossWeights = DEFAULT_WEIGHTS, seed: int = 0, settings: TrainSettings | None = None,
          checkpoint_path=None, eval_split: str = "eval",
          on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Train in place; returns one history row per epoch.

    Rows hold ``epoch``, ``lr`` (at the epoch's last step), ``loss`` (mean
    training loss over the epoch) and ``acc_exit{k}`` on ``eval_split``.
    """
    settings = settings or TrainSettings()
    if epochs is not None or batch_size is not None:
        settings = TrainSettings(**{**settings.__dict__,
                                    **({"epochs": epochs} if epochs is not None else {}),
                                    **({"batch_size": batch_size} if batch_size is not None else {})})
    x_train, y_train = dataset.split("train")
    if len(y_train) == 0:
        raise ContractError("dataset has no train split")
    x_eval, y_eval = dataset.split(eval_split)
    params = list(model.named_parameters())
    state = OptimizerState(weight_decay=settings.weight_decay)
    steps_per_epoch = -(-len(y_train) // settings.batch_size)
    total_steps = settings.epochs * steps_per_epoch
    warmup_steps = int(round(settings.warmup_epochs * steps_per_epoch))
    rng = np.random.Generator(np.random.PCG64(seed))
    history = []
    step = 0
    for epoch in range(1, settings.epochs + 1):
        order = rng.permutation(len(y_train))
        losses = []
        lr = 0.0
        for s in range(0, len(order), settings.batch_size):
            idx = order[s:s + settings.batch_size]
            model.zero_grad()
            out = model(Tensor(x_train[idx]))
            loss = total_loss(out.logits, y_train[idx], weights)
            loss.backward()
            lr = cosine_lr(step, total_steps, settings.lr, warmup_steps, settings.min_lr)
            optimizer_step(state, params, [p.grad for _, p in params], lr)
            losses.append(loss.item())
            step += 1
        row = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses))}
        acc = exit_accuracies(model, x_eval, y_eval, settings.eval_batch_size)
        row.update({f"acc_exit{k}": acc[k] for k in model.exits})
        history.append(row)
        if on_epoch:
            on_epoch(row)
    model.zero_grad()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, model.config)
    return history


def write_history(fh: TextIO, history: Sequence[dict]) -> None:
    if not history:
        return
    writer = csv.writer(fh, lineterminator="\n")
    keys = list(history[0])
    writer.writerow(keys)
    for row in history:
        writer.writerow([row[k] if isinstance(row[k], int) else repr(float(row[k])) for k in keys])
