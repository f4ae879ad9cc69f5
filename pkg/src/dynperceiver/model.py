"""The two-branch model: a convolutional feature branch and a latent
classification branch, linked by cross attention in both directions, with
four exits.

Execution is expressed as a fixed schedule of steps over a shared
:class:`ActivationStore`, so the full forward pass and the early-exit engine
run literally the same code in the same order.  The store records which
activations every step reads.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ContractError, NumericalError, ShapeError
from .nn import (Conv2d, CrossAttention, LayerNorm, Linear, Module, Parameter, TokenMixer,
                 TransformerBlock, adaptive_avg_pool, global_avg_pool)
from .tensor import Tensor


class ConvBlock(Module):
    """Residual depthwise-separable block: ``x + gelu(pw(gelu(dw(x))))``."""

    def __init__(self, channels: int):
        self.dw = Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.pw = Conv2d(channels, channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        return T.add(x, T.gelu(self.pw(T.gelu(self.dw(x)))))


class FeatureStage(Module):
    """Stand-in CNN stage: 3x3 strided conv followed by depthwise-separable blocks."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, blocks: int):
        self.conv = Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.blocks = [ConvBlock(out_ch) for _ in range(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        x = T.gelu(self.conv(x))
        for block in self.blocks:
            x = block(x)
        return x


class X2Z(Module):
    """Latent queries a depthwise-convolved, 7x7-pooled feature map."""

    def __init__(self, latent_dim: int, feat_ch: int, pool_size: int = 7):
        self.pool_size = pool_size
        self.dwc = Conv2d(feat_ch, feat_ch, 3, padding=1, groups=feat_ch)
        self.attn = CrossAttention(latent_dim, feat_ch, rpb=True)

    def forward(self, z: Tensor, x: Tensor) -> Tensor:
        f = adaptive_avg_pool(self.dwc(x), self.pool_size)
        B, C = f.shape[:2]
        tokens = T.transpose(T.reshape(f, (B, C, self.pool_size * self.pool_size)), (0, 2, 1))
        return self.attn(z, tokens)


class Z2X(Module):
    """Every spatial position of the feature map queries the latent code."""

    def __init__(self, feat_ch: int, latent_dim: int):
        self.attn = CrossAttention(feat_ch, latent_dim)

    def forward(self, x: Tensor, z: Tensor) -> Tensor:
        B, C, H, W = x.shape
        if z.shape[-1] != self.attn.kv_dim:
            raise ShapeError(f"latent width {z.shape[-1]} does not match Z2X key width {self.attn.kv_dim}")
        q = T.transpose(T.reshape(x, (B, C, H * W)), (0, 2, 1))
        out = self.attn(q, z)
        return T.reshape(T.transpose(out, (0, 2, 1)), (B, C, H, W))


class ClassificationStage(Module):
    def __init__(self, config: ModelConfig, i: int):
        s = config.stages[i - 1]
        width = config.stage_width(i)
        feat_ch = config.feature_shapes()[i - 1][0]
        self.x2z = X2Z(width, feat_ch, config.pool_size)
        self.blocks = [TransformerBlock(width, s.sa_heads, s.widening) for _ in range(s.sa_blocks)]
        if i < 4:
            self.mixer = TokenMixer(config.stage_tokens(i), config.token_schedule[i - 1],
                                    width, config.channel_schedule[i - 1])
            # Keeps the latent at unit scale; two small-init projections in a row would
            # otherwise shrink it by orders of magnitude per stage.
            self.mixer_norm = LayerNorm(config.channel_schedule[i - 1])
        else:
            self.mixer = None
            self.mixer_norm = None

    def forward(self, z: Tensor, x: Tensor) -> Tensor:
        z = self.x2z(z, x)
        for block in self.blocks:
            z = block(z)
        return z if self.mixer is None else self.mixer_norm(self.mixer(z))


class ExitHead(Module):
    """Linear classifier, optionally fed the predecessor exit's logits through an FKT link."""

    def __init__(self, in_dim: int, num_classes: int, fkt: bool):
        self.fkt = Linear(num_classes, num_classes) if fkt else None
        self.fc = Linear(in_dim + (num_classes if fkt else 0), num_classes)

    def forward(self, pooled: Tensor, prev_logits: Tensor | None = None) -> Tensor:
        return self.fc(self.augment(pooled, prev_logits))

    def augment(self, pooled: Tensor, prev_logits: Tensor | None) -> Tensor:
        if self.fkt is None:
            return pooled
        if prev_logits is None:
            raise ContractError("FKT link needs the predecessor exit's logits")
        return T.concat([pooled, self.fkt(prev_logits)], axis=-1)


class ActivationStore:
    """Named activations of one forward pass, with a log of who read what."""

    def __init__(self):
        self.values: dict[str, Tensor] = {}
        self.reads: dict[str, list[str]] = defaultdict(list)

    def put(self, name: str, value: Tensor) -> None:
        self.values[name] = value

    def read(self, reader: str, name: str) -> Tensor:
        if name not in self.values:
            raise ContractError(f"{reader} needs {name}, which has not been computed")
        self.reads[reader].append(name)
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values


@dataclass
class ForwardOutputs:
    logits: dict[int, Tensor]
    pooled: dict[str, Tensor]
    store: ActivationStore = field(repr=False)


_STEPS = [("cls", 1), ("feat", 1), ("cls", 2), ("feat", 2), ("cls", 3), ("exit", 1),
          ("feat", 3), ("cls", 4), ("exit", 2), ("feat", 4), ("exit", 3), ("exit", 4)]


def execution_schedule(exits=(1, 2, 3, 4)) -> list[tuple[str, int]]:
    """Step order: stages 1-2 of both branches, then in stages 3-4 the
    classification branch and its exit run before the feature branch."""
    return [(kind, i) for kind, i in _STEPS if kind != "exit" or i in exits]


def _check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"non-finite activation at {where}")
    return t


class DynPerceiver(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        shapes = config.feature_shapes()
        self.latent = Parameter((config.latent_tokens, config.latent_width))
        self.feature_stages = [
            FeatureStage(shapes[i][0], s.channels, s.stride, s.conv_blocks)
            for i, s in enumerate(config.stages)
        ]
        self.cls_stages = [ClassificationStage(config, i) for i in range(1, 5)]
        self.z2x = [Z2X(s.channels, d) for s, d in zip(config.stages, config.channel_schedule)]
        nc = config.num_classes
        d3, d4 = config.channel_schedule[2], config.channel_schedule[3]
        c4 = config.stages[3].channels
        in_dims = {1: d3, 2: d4, 3: c4, 4: c4 + d4}
        self.heads = {}
        for k in config.exits:
            self.heads[str(k)] = ExitHead(in_dims[k], nc, fkt=self.predecessor(k) is not None)

    # -- structure -----------------------------------------------------------
    @property
    def exits(self) -> tuple[int, ...]:
        return self.config.exits

    def predecessor(self, k: int) -> int | None:
        earlier = [e for e in self.config.exits if e < k]
        return earlier[-1] if earlier else None

    def schedule(self) -> list[tuple[str, int]]:
        return execution_schedule(self.config.exits)

    # -- steps ---------------------------------------------------------------
    def start(self, image: Tensor) -> ActivationStore:
        c = self.config.image
        if image.ndim != 4 or image.shape[1:] != (c.channels, c.height, c.width):
            raise ShapeError(f"expected images [B,{c.channels},{c.height},{c.width}], got {image.shape}")
        store = ActivationStore()
        B = image.shape[0]
        store.put("X0", image)
        store.put("Z0", T.expand(self.latent, (B,) + self.latent.shape))
        return store

    def run_step(self, store: ActivationStore, kind: str, i: int) -> Tensor:
        if kind == "cls":
            reader = f"cls{i}"
            z = store.read(reader, f"Z{i - 1}")
            x = store.read(reader, f"X{i - 1}")
            out = _check_finite(self.cls_stages[i - 1](z, x), f"classification_stage{i}")
            store.put(f"Z{i}", out)
        elif kind == "feat":
            reader = f"feat{i}"
            x = store.read(reader, f"X{i - 1}")
            z = store.read(reader, f"Z{i}")
            xt = _check_finite(self.feature_stages[i - 1](x), f"feature_stage{i}.conv")
            out = _check_finite(self.z2x[i - 1](xt, z), f"feature_stage{i}.z2x")
            store.put(f"X{i}", out)
        elif kind == "exit":
            out = self.exit_logits(store, i)
        else:
            raise ContractError(f"unknown step {kind!r}")
        return out

    def _pooled(self, store: ActivationStore, reader: str, name: str) -> Tensor:
        key = f"pool_{name}"
        if key not in store:
            src = store.read(reader, name)
            store.put(key, T.mean(src, axis=1) if name.startswith("Z") else global_avg_pool(src))
        return store.read(reader, key)

    def exit_logits(self, store: ActivationStore, k: int) -> Tensor:
        reader = f"exit{k}"
        if k == 1:
            pooled = self._pooled(store, reader, "Z3")
        elif k == 2:
            pooled = self._pooled(store, reader, "Z4")
        elif k == 3:
            pooled = self._pooled(store, reader, "X4")
        else:
            pooled = T.concat([self._pooled(store, reader, "X4"), self._pooled(store, reader, "Z4")], axis=-1)
        prev = self.predecessor(k)
        prev_logits = store.read(reader, f"logits{prev}") if prev is not None else None
        logits = _check_finite(self.heads[str(k)](pooled, prev_logits), f"exit{k}")
        store.put(f"logits{k}", logits)
        return logits

    # -- public entry points ---------------------------------------------------
    def forward(self, image: Tensor) -> ForwardOutputs:
        store = self.start(image)
        for kind, i in self.schedule():
            self.run_step(store, kind, i)
        logits = {k: store.values[f"logits{k}"] for k in self.config.exits}
        pooled = {k[5:]: v for k, v in store.values.items() if k.startswith("pool_")}
        return ForwardOutputs(logits=logits, pooled=pooled, store=store)

    full_forward = forward

    def classification_stage(self, i: int, z_prev: Tensor, x_prev: Tensor) -> Tensor:
        return self.cls_stages[i - 1](z_prev, x_prev)

    def feature_stage(self, i: int, x_prev: Tensor, z_i: Tensor) -> Tensor:
        return self.z2x[i - 1](self.feature_stages[i - 1](x_prev), z_i)

    def fkt_augment(self, k: int, pooled: Tensor, prev_logits: Tensor | None) -> Tensor:
        """Head input of exit ``k``: ``pooled`` plus the FKT projection of the predecessor's logits."""
        return self.heads[str(k)].augment(pooled, prev_logits)


def build_model(config: ModelConfig, seed: int = 0) -> DynPerceiver:
    config.validate()
    model = DynPerceiver(config)
    model.initialize(seed)
    return model
