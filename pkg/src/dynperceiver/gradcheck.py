"""Whole-model gradient check against central finite differences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ContractError
from .losses import LossWeights, total_loss
from .model import DynPerceiver, build_model
from .tensor import Tensor

MAX_GRADCHECK_PARAMS = 200_000


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    num_parameters: int
    checked_entries: int

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def worst(self, n: int = 5) -> list[tuple[str, float]]:
        return sorted(self.errors.items(), key=lambda kv: -kv[1])[:n]


def randomize(model: DynPerceiver, seed: int) -> None:
    """Redraw every parameter at a well-conditioned point for finite differences.

    The training init (small weights, zero biases, zero RPB table) leaves many
    gradients near zero, where central differences measure rounding noise rather
    than the backward rule.  Here weights get std 1/sqrt(fan_in), so activations,
    attention scores and logits all stay O(1), and biases, norm gains and the
    RPB table get nonzero values.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    for path, p in model.named_parameters():
        if path == "latent":
            p.data = rng.normal(0.0, 1.0, size=p.shape)
        elif p.ndim >= 2 and not path.endswith(".table"):
            fan_in = int(np.prod(p.shape[1:]))
            p.data = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=p.shape)
        elif p.init == "ones":
            p.data = 1.0 + rng.normal(0.0, 0.1, size=p.shape)
        else:
            p.data = rng.normal(0.0, 0.5 if path.endswith(".table") else 0.1, size=p.shape)


def model_gradcheck(config: ModelConfig, seed: int = 0, eps: float = 1e-5, batch: int | None = None,
                    max_entries: int | None = None) -> GradcheckReport:
    model = build_model(config, seed)
    n = model.num_parameters()
    if n >= MAX_GRADCHECK_PARAMS:
        raise ContractError(f"model has {n} parameters; gradcheck is limited to fewer than "
                            f"{MAX_GRADCHECK_PARAMS} (finite differences need two forwards per entry)")
    randomize(model, seed)
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    c = config.image
    # Every class appears as a label, so each head row sees an O(1) error signal.
    batch = batch or config.num_classes
    images = Tensor(rng.normal(size=(batch, c.channels, c.height, c.width)))
    labels = rng.permutation(np.arange(batch) % config.num_classes)
    # alpha = 1 leaves out the distillation terms: their teacher is detached on purpose, so
    # backprop and finite differences of those terms legitimately disagree.
    weights = LossWeights(alpha=1.0, label_smoothing=0.1)

    def loss():
        return total_loss(model(images).logits, labels, weights)

    named = list(model.named_parameters())
    errs = T.gradient_errors(loss, [p for _, p in named], eps, max_entries)
    checked = sum(min(p.size, max_entries) if max_entries else p.size for _, p in named)
    return GradcheckReport(dict(zip([k for k, _ in named], errs)), n, checked)
