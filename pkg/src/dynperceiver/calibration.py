"""Threshold solving under a FLOPs budget and accuracy-vs-FLOPs sweeps.

Exit proportions follow a geometric family ``p_k ∝ (1 - q)^(k-1)``.  For
``0 < q < 1`` this is the usual ``q (1 - q)^(k-1)`` shape, front-loaded on
early exits; ``q <= 0`` extends the family so mass shifts toward the last
exit, which is needed to reach budgets above the mean exit cost.  The
endpoints ``q = 1`` and ``q = -inf`` put all mass on the first and last exit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from .errors import BudgetError, ContractError
from .exits import confidence
from .flops import flops_profile
from .model import DynPerceiver
from .tensor import Tensor, no_grad

ABOVE_ONE = float(np.nextafter(1.0, 2.0))
_MAX_LOG_RATIO = 700.0


@dataclass
class CalibrationSet:
    """Per-sample confidence and correctness at every exit, plus exit costs."""

    confidences: np.ndarray  # [N, K]
    correct: np.ndarray  # [N, K] bool
    costs: np.ndarray  # [K]
    exits: tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self):
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        self.correct = np.asarray(self.correct, dtype=bool)
        self.costs = np.asarray(self.costs, dtype=np.float64)
        if self.confidences.ndim != 2 or self.confidences.shape != self.correct.shape:
            raise ContractError("confidences and correct must both be [N, K]")
        if self.confidences.shape[1] != self.costs.size:
            raise ContractError("one cost per exit required")
        if np.any(np.diff(self.costs) <= 0):
            raise ContractError(f"exit costs must be strictly increasing, got {self.costs}")

    def __len__(self) -> int:
        return self.confidences.shape[0]

    @property
    def num_exits(self) -> int:
        return self.costs.size


def collect_records(model: DynPerceiver, images: np.ndarray, labels: Sequence[int]) -> CalibrationSet:
    """Evaluate every exit on every image (one image at a time, as the engine does)."""
    exits = model.exits
    conf = np.zeros((len(labels), len(exits)))
    correct = np.zeros((len(labels), len(exits)), dtype=bool)
    with no_grad():
        for n in range(len(labels)):
            out = model(Tensor(images[n:n + 1]))
            for j, k in enumerate(exits):
                row = out.logits[k].data[0]
                conf[n, j] = confidence(row)
                correct[n, j] = int(np.argmax(row)) == int(labels[n])
    costs = flops_profile(model.config).costs()
    return CalibrationSet(conf, correct, np.array(costs, dtype=np.float64), tuple(exits))


def exit_fractions(q: float, K: int) -> np.ndarray:
    """Normalised ``(1 - q)^(k-1)`` for k = 1..K."""
    if K < 2:
        raise ContractError(f"need at least two exits, got K={K}")
    if math.isnan(q) or q > 1.0:
        raise ContractError(f"q must be <= 1, got {q}")
    p = np.zeros(K)
    if q == 1.0:
        p[0] = 1.0
        return p
    if q == -math.inf:
        p[-1] = 1.0
        return p
    return _fractions(math.log1p(-q), K)


def _fractions(log_ratio: float, K: int) -> np.ndarray:
    logw = np.arange(K) * log_ratio
    w = np.exp(logw - logw.max())
    return w / w.sum()


def expected_cost(q: float, costs) -> float:
    costs = np.asarray(costs, dtype=np.float64)
    return float(exit_fractions(q, costs.size) @ costs)


def _q_from_log_ratio(s: float) -> float:
    return 1.0 - math.exp(s)


def solve_q(costs, budget: float, clamp: bool = False) -> float:
    """``q`` whose exit proportions have expected cost ``budget``."""
    costs = np.asarray(costs, dtype=np.float64)
    lo_cost, hi_cost = float(costs[0]), float(costs[-1])
    if not lo_cost <= budget <= hi_cost:
        if not clamp:
            raise BudgetError(budget, lo_cost, hi_cost)
        budget = min(max(budget, lo_cost), hi_cost)
    if budget == lo_cost:
        return 1.0
    if budget == hi_cost:
        return -math.inf
    f = lambda s: float(_fractions(s, costs.size) @ costs) - budget  # noqa: E731
    lo, hi = -1.0, 1.0
    while f(lo) > 0 and lo > -_MAX_LOG_RATIO:
        lo *= 2
    while f(hi) < 0 and hi < _MAX_LOG_RATIO:
        hi *= 2
    lo, hi = max(lo, -_MAX_LOG_RATIO), min(hi, _MAX_LOG_RATIO)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    s = lo if abs(f(lo)) <= abs(f(hi)) else hi
    return _q_from_log_ratio(s)


def thresholds_from_fractions(cal: CalibrationSet, p) -> np.ndarray:
    """Thresholds so that about ``p_k N`` calibration samples leave at exit k.

    Exits are filled in order; exit k takes the most confident survivors (ties
    at the threshold all leave) until ``round(N (p_1 + ... + p_k))`` samples
    have left in total.  Rounding the running total rather than each ``p_k N``
    keeps every exit's count within one of ``round(p_k N)``, the last included.
    """
    p = np.asarray(p, dtype=np.float64)
    K = cal.num_exits
    if p.size != K or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ContractError(f"p must be a distribution over {K} exits, got {p}")
    N = len(cal)
    survivors = np.arange(N)
    thresholds = np.zeros(K)
    cumulative = np.cumsum(p)
    for k in range(K - 1):
        target = int(math.floor(cumulative[k] * N + 0.5)) - (N - survivors.size)
        if target > survivors.size:
            break  # this and all later exits keep threshold 0
        if target <= 0:
            thresholds[k] = ABOVE_ONE
            continue
        conf = cal.confidences[survivors, k]
        theta = np.sort(conf)[::-1][target - 1]
        thresholds[k] = theta
        survivors = survivors[conf < theta]
    return thresholds


def exit_indices(confidences: np.ndarray, thresholds) -> np.ndarray:
    """Column index of the first exit whose confidence reaches its threshold."""
    fires = np.asarray(confidences) >= np.asarray(thresholds)[None, :]
    fires[:, -1] = True
    return np.argmax(fires, axis=1)


@dataclass
class SimResult:
    exit_index: np.ndarray
    mean_flops: float
    accuracy: float


def simulate(records: CalibrationSet, thresholds) -> SimResult:
    idx = exit_indices(records.confidences, thresholds)
    rows = np.arange(len(records))
    return SimResult(
        exit_index=idx,
        mean_flops=float(records.costs[idx].mean()),
        accuracy=float(records.correct[rows, idx].mean()),
    )


def budget_sweep(cal: CalibrationSet, eval_set: CalibrationSet, budgets: Sequence[float],
                 clamp: bool = False) -> list[dict]:
    """For each budget: solve q, derive thresholds on ``cal``, evaluate on both splits."""
    rows = []
    for budget in budgets:
        q = solve_q(cal.costs, float(budget), clamp=clamp)
        theta = thresholds_from_fractions(cal, exit_fractions(q, cal.num_exits))
        on_eval = simulate(eval_set, theta)
        on_cal = simulate(cal, theta)
        rows.append({
            "budget": float(budget), "q": q, "thresholds": theta,
            "mean_flops": on_eval.mean_flops, "accuracy": on_eval.accuracy,
            "cal_mean_flops": on_cal.mean_flops, "cal_accuracy": on_cal.accuracy,
        })
    return rows


def write_curve(fh: TextIO, rows: Sequence[dict], exits: Sequence[int] = (1, 2, 3, 4)) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["budget", "q", *[f"theta_{k}" for k in exits],
                     "mean_flops", "accuracy", "cal_mean_flops", "cal_accuracy"])
    for r in rows:
        writer.writerow([repr(r["budget"]), repr(r["q"]), *[repr(float(t)) for t in r["thresholds"]],
                         repr(r["mean_flops"]), repr(r["accuracy"]),
                         repr(r["cal_mean_flops"]), repr(r["cal_accuracy"])])
