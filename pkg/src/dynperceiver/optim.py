"""AdamW with decoupled weight decay and a warmup + cosine learning rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, NumericalError
from .nn import Parameter


@dataclass
class OptimizerState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def decays(path: str, p: Parameter) -> bool:
    """Weight decay applies to weight matrices and kernels only."""
    return p.ndim >= 2 and not path.endswith(".table") and path != "latent"


def optimizer_step(state: OptimizerState, params: Sequence[tuple[str, Parameter]],
                   grads: Sequence[np.ndarray | None], lr: float) -> None:
    """One AdamW update in place; a missing gradient counts as zero."""
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    for (path, p), g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {path}")
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    for (path, p), g in zip(params, grads):
        g = np.zeros_like(p.data) if g is None else g
        m = state.m.setdefault(path, np.zeros_like(p.data))
        v = state.v.setdefault(path, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay and decays(path, p):
            p.data *= 1.0 - lr * state.weight_decay
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0, min_lr: float = 0.0) -> float:
    """Linear ramp from 0 over ``warmup_steps``, then cosine decay to ``min_lr`` at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
