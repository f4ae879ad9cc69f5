"""Confidence-gated early-exit inference."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import ContractError, NumericalError
from .flops import FlopsProfile, flops_profile
from .model import DynPerceiver
from .tensor import Tensor, no_grad


def confidence(logits) -> float:
    """Largest softmax probability of a single logit vector."""
    x = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64).reshape(-1)
    if np.isnan(x).any():
        raise NumericalError("NaN logits")
    e = np.exp(x - x.max())
    return float(e.max() / e.sum())


@dataclass(frozen=True)
class ExitPolicy:
    """Per-exit thresholds; a sample stops at the first exit whose confidence reaches its threshold."""

    thresholds: tuple[float, ...]
    exits: tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "exits", tuple(self.exits))
        if len(self.thresholds) != len(self.exits):
            raise ContractError(f"{len(self.thresholds)} thresholds for exits {self.exits}")
        if self.thresholds[-1] != 0.0:
            raise ContractError("the final threshold must be 0 so the last exit always fires")
        if any(np.isnan(t) or t < 0 for t in self.thresholds):
            raise ContractError(f"thresholds must be non-negative numbers, got {self.thresholds}")

    def threshold(self, k: int) -> float:
        return self.thresholds[self.exits.index(k)]


@dataclass
class ExitTrace:
    exit_taken: int
    confidences: list[tuple[int, float]]
    flops_used: float
    prediction: int
    logits: dict[int, np.ndarray] = field(default_factory=dict, repr=False)


def infer(model: DynPerceiver, image: Tensor, policy: ExitPolicy,
          profile: FlopsProfile | None = None) -> ExitTrace:
    """Run one image through the schedule, stopping at the first confident exit."""
    if image.ndim == 3:
        image = Tensor(image.data[None])
    if image.shape[0] != 1:
        raise ContractError(f"infer takes a single image, got batch of {image.shape[0]}")
    if tuple(policy.exits) != tuple(model.exits):
        raise ContractError(f"policy exits {policy.exits} do not match model exits {model.exits}")
    profile = profile or flops_profile(model.config)
    confidences = []
    seen = {}
    with no_grad():
        store = model.start(image)
        for kind, i in model.schedule():
            out = model.run_step(store, kind, i)
            if kind != "exit":
                continue
            seen[i] = out.data[0]
            conf = confidence(out.data[0])
            confidences.append((i, conf))
            if conf >= policy.threshold(i):
                return ExitTrace(exit_taken=i, confidences=confidences,
                                 flops_used=float(profile.cumulative[i]),
                                 prediction=int(np.argmax(out.data[0])), logits=seen)
    raise AssertionError("final exit did not fire")  # unreachable: last threshold is 0


@dataclass
class EvalResult:
    accuracy: float
    mean_flops: float
    exit_histogram: dict[int, int]
    traces: list[ExitTrace]


def batch_evaluate(model: DynPerceiver, images: np.ndarray, labels: Sequence[int],
                   policy: ExitPolicy, profile: FlopsProfile | None = None) -> EvalResult:
    if len(labels) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    profile = profile or flops_profile(model.config)
    traces = [infer(model, Tensor(images[n:n + 1]), policy, profile) for n in range(len(labels))]
    correct = sum(int(t.prediction == int(y)) for t, y in zip(traces, labels))
    hist = Counter(t.exit_taken for t in traces)
    return EvalResult(
        accuracy=correct / len(labels),
        mean_flops=sum(profile.cumulative[t.exit_taken] for t in traces) / len(labels),
        exit_histogram={k: hist.get(k, 0) for k in model.exits},
        traces=traces,
    )


def write_trace_log(fh: TextIO, traces: Iterable[ExitTrace], exits: Sequence[int] = (1, 2, 3, 4),
                    sample_ids: Iterable | None = None) -> None:
    """One CSV row per sample: id, exit taken, confidence at each evaluated exit, FLOPs."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["sample_id", "exit", *[f"conf_{k}" for k in exits], "flops", "prediction"])
    traces = list(traces)
    ids = list(sample_ids) if sample_ids is not None else range(len(traces))
    for sid, t in zip(ids, traces):
        conf = dict(t.confidences)
        writer.writerow([sid, t.exit_taken, *[repr(conf[k]) if k in conf else "" for k in exits],
                         repr(t.flops_used), t.prediction])
