"""Neural building blocks: linear, conv, norms, attention, token mixing."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

POOL_SIZE = 7


class Parameter(Tensor):
    """A trainable leaf tensor that knows how it should be initialised."""

    def __init__(self, shape, init: str = "trunc_normal", fan_in: int | None = None):
        super().__init__(np.zeros(shape), requires_grad=True)
        self.init = init
        self.fan_in = fan_in

    def initialize(self, seed: int, path: str) -> None:
        rng = T.param_rng(seed, path)
        if self.init == "trunc_normal":
            self.data[...] = T.trunc_normal(rng, self.shape, 0.02)
        elif self.init == "kaiming":
            self.data[...] = rng.normal(0.0, math.sqrt(2.0 / self.fan_in), size=self.shape)
        elif self.init == "ones":
            self.data[...] = 1.0
        elif self.init == "zeros":
            self.data[...] = 0.0
        else:
            raise ValueError(f"unknown init {self.init!r}")


class Module:
    """Container with path-named parameters, discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def initialize(self, seed: int) -> None:
        for path, p in self.named_parameters():
            p.initialize(seed, path)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter((out_features, in_features))
        self.bias = Parameter((out_features,), init="zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int = 0, groups: int = 1, bias: bool = True):
        if in_ch % groups or out_ch % groups:
            raise ConfigError("groups", f"{groups} must divide in_ch={in_ch} and out_ch={out_ch}")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding, self.groups = kernel, stride, padding, groups
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = Parameter((out_ch, in_ch // groups, kernel, kernel), init="kaiming", fan_in=fan_in)
        self.bias = Parameter((out_ch,), init="zeros") if bias else None

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_ch == self.out_ch

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} input channels, got {x.shape}")
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.weight = Parameter((dim,), init="ones")
        self.bias = Parameter((dim,), init="zeros")

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


def adaptive_avg_pool(x: Tensor, out: int) -> Tensor:
    return T.adaptive_avg_pool2d(x, out)


def global_avg_pool(x: Tensor) -> Tensor:
    """``[B, C, H, W] -> [B, C]``."""
    B, C = x.shape[:2]
    return T.reshape(T.adaptive_avg_pool2d(x, 1), (B, C))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return T.softmax(x, axis)


class RelativePositionBias(Module):
    """Learnable per-head bias over the key positions of the pooled 7x7 grid.

    Latent queries carry no spatial coordinate, so the bias is indexed by the
    key position alone.
    """

    def __init__(self, num_heads: int = 1, num_keys: int = POOL_SIZE * POOL_SIZE):
        self.num_keys = num_keys
        self.table = Parameter((num_heads, num_keys), init="zeros")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, C = x.shape
    return T.transpose(T.reshape(x, (B, L, heads, C // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, L, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, h * d))


class MultiHeadSelfAttention(Module):
    """``proj(concat_heads(softmax(Q K^T / sqrt(d_h)) V))``; the residual lives in the block."""

    def __init__(self, dim: int, num_heads: int):
        if dim % num_heads:
            raise ConfigError("sa_heads", f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.scale = 1.0 / math.sqrt(dim // num_heads)
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim, bias=False)  # a key bias shifts each score row uniformly: no effect
        self.v = Linear(dim, dim)
        self.proj = Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        h = self.num_heads
        q = _split_heads(self.q(x), h)
        k = _split_heads(self.k(x), h)
        v = _split_heads(self.v(x), h)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), self.scale)
        attn = T.softmax(scores, axis=-1)
        return self.proj(_merge_heads(T.matmul(attn, v)))


class MLP(Module):
    def __init__(self, dim: int, hidden: int):
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: ``z + MHSA(LN(z))`` then ``z + MLP(LN(z))``."""

    def __init__(self, dim: int, num_heads: int, widening: int):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, widening * dim)

    def forward(self, z: Tensor) -> Tensor:
        z = T.add(z, self.attn(self.norm1(z)))
        return T.add(z, self.mlp(self.norm2(z)))


class CrossAttention(Module):
    """Single-head cross attention with a residual on the query stream.

    Queries and keys/values are layer-normed, then projected to the query width
    ``dim``; the key/value projections absorb any difference in channel width.
    A single-channel key/value stream is left unnormalised, since a layer norm
    over one channel would map every input to the same constant.
    """

    def __init__(self, dim: int, kv_dim: int, rpb: bool = False):
        self.dim, self.kv_dim = dim, kv_dim
        self.scale = 1.0 / math.sqrt(dim)
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(kv_dim) if kv_dim > 1 else None
        self.q = Linear(dim, dim)
        self.k = Linear(kv_dim, dim, bias=False)
        self.v = Linear(kv_dim, dim)
        self.proj = Linear(dim, dim)
        self.rpb = RelativePositionBias(1) if rpb else None

    def forward(self, q_src: Tensor, kv_src: Tensor) -> Tensor:
        if q_src.shape[-1] != self.dim or kv_src.shape[-1] != self.kv_dim:
            raise ShapeError(
                f"cross attention expects widths ({self.dim}, {self.kv_dim}), "
                f"got {q_src.shape} and {kv_src.shape}")
        if self.rpb is not None and kv_src.shape[1] != self.rpb.num_keys:
            raise ShapeError(f"relative position bias needs {self.rpb.num_keys} keys, got {kv_src.shape[1]}")
        q = self.q(self.norm_q(q_src))
        kv = self.norm_kv(kv_src) if self.norm_kv is not None else kv_src
        k, v = self.k(kv), self.v(kv)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), self.scale)
        if self.rpb is not None:
            scores = T.add(scores, self.rpb.table)
        attn = T.softmax(scores, axis=-1)
        return T.add(q_src, self.proj(T.matmul(attn, v)))


class TokenMixer(Module):
    """Shrinks the token axis (per channel) and then widens the channel axis (per token)."""

    def __init__(self, tokens_in: int, tokens_out: int, ch_in: int, ch_out: int):
        if tokens_out > tokens_in:
            raise ConfigError("token_schedule", f"mixer cannot grow tokens {tokens_in} -> {tokens_out}")
        if ch_out < ch_in:
            raise ConfigError("channel_schedule", f"mixer cannot shrink channels {ch_in} -> {ch_out}")
        self.tokens_in, self.tokens_out = tokens_in, tokens_out
        self.ch_in, self.ch_out = ch_in, ch_out
        self.token_down = Linear(tokens_in, tokens_out)
        self.channel_up = Linear(ch_in, ch_out)

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[1:] != (self.tokens_in, self.ch_in):
            raise ShapeError(f"token mixer expects [B,{self.tokens_in},{self.ch_in}], got {z.shape}")
        z = T.transpose(self.token_down(T.transpose(z, (0, 2, 1))), (0, 2, 1))
        return self.channel_up(z)
