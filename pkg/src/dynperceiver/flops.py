"""Closed-form FLOPs accounting and the runtime counter it is checked against.

Costs are per image and follow the convention documented in
:mod:`dynperceiver.tensor`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .model import DynPerceiver, execution_schedule
from .tensor import NORM_FLOPS_PER_ELEMENT, SOFTMAX_FLOPS_PER_ELEMENT, Tensor, count_flops, no_grad


@dataclass
class FlopsProfile:
    segments: dict[str, int]
    cumulative: dict[int, int]

    @property
    def exits(self) -> list[int]:
        return sorted(self.cumulative)

    def costs(self) -> list[int]:
        return [self.cumulative[k] for k in self.exits]

    @property
    def total(self) -> int:
        return self.cumulative[max(self.cumulative)]


def linear_flops(n: int, fan_in: int, fan_out: int, bias: bool = True) -> int:
    return 2 * n * fan_in * fan_out + (n * fan_out if bias else 0)


def conv_flops(kernel: int, in_per_group: int, out_ch: int, h_out: int, w_out: int, bias: bool = True) -> int:
    n = out_ch * h_out * w_out
    return 2 * kernel * kernel * in_per_group * n + (n if bias else 0)


def norm_flops(n: int, dim: int) -> int:
    return NORM_FLOPS_PER_ELEMENT * n * dim


def softmax_flops(n: int) -> int:
    return SOFTMAX_FLOPS_PER_ELEMENT * n


def cross_attention_flops(lq: int, lk: int, dim: int, kv_dim: int, rpb: bool) -> int:
    scores = lq * lk
    return (norm_flops(lq, dim) + (norm_flops(lk, kv_dim) if kv_dim > 1 else 0)
            + linear_flops(lq, dim, dim) + linear_flops(lk, kv_dim, dim) + linear_flops(lk, kv_dim, dim, bias=False)
            + 2 * lq * lk * dim + scores + (scores if rpb else 0) + softmax_flops(scores)
            + 2 * lq * lk * dim + linear_flops(lq, dim, dim) + lq * dim)


def transformer_block_flops(tokens: int, dim: int, heads: int, widening: int) -> int:
    L, D = tokens, dim
    hidden = widening * D
    attn = (norm_flops(L, D) + 2 * linear_flops(L, D, D) + linear_flops(L, D, D, bias=False)
            + 2 * L * L * D + heads * L * L + softmax_flops(heads * L * L) + 2 * L * L * D
            + linear_flops(L, D, D) + L * D)
    mlp = norm_flops(L, D) + linear_flops(L, D, hidden) + L * hidden + linear_flops(L, hidden, D) + L * D
    return attn + mlp


def feature_stage_flops(in_ch: int, out_ch: int, h: int, w: int, blocks: int) -> int:
    n = out_ch * h * w
    total = conv_flops(3, in_ch, out_ch, h, w) + n
    block = conv_flops(3, 1, out_ch, h, w) + n + conv_flops(1, out_ch, out_ch, h, w) + n + n
    return total + blocks * block


def unit_flops(config: ModelConfig) -> dict[str, int]:
    """Cost of every architectural unit, keyed ``x2z{i}``, ``att{i}``, ``mixer{i}``,
    ``conv{i}``, ``z2x{i}``, ``pool_*``, ``exit{k}``."""
    shapes = config.feature_shapes()
    nc = config.num_classes
    grid = config.pool_size * config.pool_size
    units: dict[str, int] = {}
    for i in range(1, 5):
        s = config.stages[i - 1]
        c_in, h_in, w_in = shapes[i - 1]
        c_out, h_out, w_out = shapes[i]
        width, tokens = config.stage_width(i), config.stage_tokens(i)
        units[f"x2z{i}"] = (conv_flops(3, 1, c_in, h_in, w_in) + c_in * h_in * w_in
                            + cross_attention_flops(tokens, grid, width, c_in, rpb=True))
        units[f"att{i}"] = s.sa_blocks * transformer_block_flops(tokens, width, s.sa_heads, s.widening)
        if i < 4:
            l_out, d_out = config.token_schedule[i - 1], config.channel_schedule[i - 1]
            units[f"mixer{i}"] = (linear_flops(width, tokens, l_out) + linear_flops(l_out, width, d_out)
                                + norm_flops(l_out, d_out))
        else:
            units[f"mixer{i}"] = 0
        units[f"conv{i}"] = feature_stage_flops(c_in, c_out, h_out, w_out, s.conv_blocks)
        units[f"z2x{i}"] = cross_attention_flops(h_out * w_out, config.token_schedule[i - 1], c_out,
                                                 config.channel_schedule[i - 1], rpb=False)
    d3, d4 = config.channel_schedule[2], config.channel_schedule[3]
    c4, h4, w4 = shapes[4]
    units["pool_Z3"] = config.token_schedule[2] * d3
    units["pool_Z4"] = config.token_schedule[3] * d4
    units["pool_X4"] = c4 * h4 * w4
    in_dims = {1: d3, 2: d4, 3: c4, 4: c4 + d4}
    exits = config.exits
    for k in exits:
        fkt = any(e < k for e in exits)
        units[f"exit{k}"] = (linear_flops(1, nc, nc) if fkt else 0) + linear_flops(1, in_dims[k] + (nc if fkt else 0), nc)
    return units


_EXIT_POOLS = {1: ("Z3",), 2: ("Z4",), 3: ("X4",), 4: ("X4", "Z4")}


def flops_profile(config: ModelConfig) -> FlopsProfile:
    """Cumulative cost of reaching each exit along the early-exit schedule."""
    units = unit_flops(config)
    cumulative: dict[int, int] = {}
    pooled: set[str] = set()
    running = 0
    for kind, i in execution_schedule(config.exits):
        if kind == "cls":
            running += units[f"x2z{i}"] + units[f"att{i}"] + units[f"mixer{i}"]
        elif kind == "feat":
            running += units[f"conv{i}"] + units[f"z2x{i}"]
        else:
            for name in _EXIT_POOLS[i]:
                if name not in pooled:
                    pooled.add(name)
                    running += units[f"pool_{name}"]
            running += units[f"exit{i}"]
            cumulative[i] = running
    return FlopsProfile(segments=units, cumulative=cumulative)


def measured_profile(model: DynPerceiver, image: Tensor | None = None) -> FlopsProfile:
    """Run the schedule on one image and tally FLOPs reported by the operations."""
    c = model.config.image
    if image is None:
        image = Tensor(np.zeros((1, c.channels, c.height, c.width)))
    cumulative: dict[int, int] = {}
    segments: dict[str, int] = {}
    with no_grad(), count_flops() as counter:
        store = model.start(image)
        for kind, i in model.schedule():
            before = counter.total
            model.run_step(store, kind, i)
            segments[f"{kind}{i}"] = counter.total - before
            if kind == "exit":
                cumulative[i] = counter.total
    return FlopsProfile(segments=segments, cumulative=cumulative)
