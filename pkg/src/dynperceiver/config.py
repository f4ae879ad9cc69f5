"""Model hyperparameters, presets and the YAML config file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

NUM_STAGES = 4
ALL_EXITS = (1, 2, 3, 4)


@dataclass(frozen=True)
class ImageSpec:
    channels: int = 1
    height: int = 32
    width: int = 32


@dataclass(frozen=True)
class StageConfig:
    channels: int
    conv_blocks: int = 1
    sa_blocks: int = 1
    sa_heads: int = 1
    widening: int = 4
    stride: int = 2


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of a four-stage model.

    ``token_schedule`` holds L1..L4 (defaults to ``[L0, L0/2, L0/4, L0/4]``).
    Latent widths follow the feature widths: the latent enters with C1
    channels, mixer i widens it to C_i for i = 1..3, and the last mixer is the
    identity, so stage 4 runs at C3.
    """

    num_classes: int
    stages: tuple[StageConfig, ...]
    latent_tokens: int = 8
    token_schedule: tuple[int, ...] | None = None
    image: ImageSpec = field(default_factory=ImageSpec)
    exits: tuple[int, ...] = ALL_EXITS
    pool_size: int = 7
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "exits", tuple(sorted(self.exits)))
        if self.token_schedule is None:
            L = self.latent_tokens
            object.__setattr__(self, "token_schedule", (L, max(1, L // 2), max(1, L // 4), max(1, L // 4)))
        else:
            object.__setattr__(self, "token_schedule", tuple(self.token_schedule))
        self.validate()

    @property
    def feature_channels(self) -> tuple[int, ...]:
        return tuple(s.channels for s in self.stages)

    @property
    def channel_schedule(self) -> tuple[int, ...]:
        """Latent widths D1..D4 (output of each mixer)."""
        c = self.feature_channels
        return (c[0], c[1], c[2], c[2])

    @property
    def latent_width(self) -> int:
        return self.stages[0].channels

    def stage_width(self, i: int) -> int:
        """Width of the latent while classification stage ``i`` (1-based) runs."""
        return self.latent_width if i == 1 else self.channel_schedule[i - 2]

    def stage_tokens(self, i: int) -> int:
        return self.latent_tokens if i == 1 else self.token_schedule[i - 2]

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        """(C, H, W) of X_0..X_4."""
        shapes = [(self.image.channels, self.image.height, self.image.width)]
        for s in self.stages:
            _, h, w = shapes[-1]
            shapes.append((s.channels, (h + 2 - 3) // s.stride + 1, (w + 2 - 3) // s.stride + 1))
        return shapes

    def validate(self) -> None:
        if len(self.stages) != NUM_STAGES:
            raise ConfigError("stages", f"expected {NUM_STAGES} stages, got {len(self.stages)}")
        if self.num_classes < 2:
            raise ConfigError("num_classes", "need at least two classes")
        if self.latent_tokens < 1:
            raise ConfigError("latent_tokens", "must be positive")
        if self.pool_size != 7:
            raise ConfigError("pool_size", "the pooled key grid is fixed at 7x7")
        for name in ("channels", "height", "width"):
            if getattr(self.image, name) < 1:
                raise ConfigError(f"image.{name}", "must be positive")
        ts = self.token_schedule
        if len(ts) != NUM_STAGES or min(ts) < 1:
            raise ConfigError("token_schedule", f"need four positive token counts, got {ts}")
        seq = (self.latent_tokens,) + ts
        if any(b > a for a, b in zip(seq, seq[1:])):
            raise ConfigError("token_schedule", f"must be non-increasing from L0, got {seq}")
        if ts[3] != ts[2]:
            raise ConfigError("token_schedule", "L4 must equal L3 (the last mixer is the identity)")
        ch = self.feature_channels
        if any(c < 1 for c in ch) or any(b < a for a, b in zip(ch, ch[1:])):
            raise ConfigError("stages.channels", f"must be positive and non-decreasing, got {ch}")
        for i, s in enumerate(self.stages, start=1):
            if s.conv_blocks < 0 or s.sa_blocks < 0 or s.widening < 1 or s.stride < 1 or s.sa_heads < 1:
                raise ConfigError(f"stages[{i}]", "block counts must be >= 0, heads/widening/stride >= 1")
            width = self.stage_width(i)
            if width % s.sa_heads:
                raise ConfigError(f"stages[{i}].sa_heads",
                                  f"latent width {width} not divisible by {s.sa_heads} heads")
        for i, (c, h, w) in enumerate(self.feature_shapes()[:NUM_STAGES]):
            if h < self.pool_size or w < self.pool_size:
                raise ConfigError("image", f"feature map X{i} is {h}x{w}, smaller than the "
                                           f"{self.pool_size}x{self.pool_size} key grid")
        if not self.exits or any(e not in ALL_EXITS for e in self.exits) or len(set(self.exits)) != len(self.exits):
            raise ConfigError("exits", f"must be a subset of {ALL_EXITS}, got {self.exits}")
        if 4 not in self.exits:
            raise ConfigError("exits", "the merged final exit (4) is always enabled")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "image": dataclasses.asdict(self.image),
            "latent": {"tokens": self.latent_tokens, "token_schedule": list(self.token_schedule)},
            "stages": [dataclasses.asdict(s) for s in self.stages],
            "exits": list(self.exits),
            "pool_size": self.pool_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            latent = d.get("latent", {})
            return cls(
                name=d.get("name", "custom"),
                num_classes=int(d["num_classes"]),
                image=ImageSpec(**d.get("image", {})),
                latent_tokens=int(latent.get("tokens", 8)),
                token_schedule=latent.get("token_schedule"),
                stages=tuple(StageConfig(**s) for s in d["stages"]),
                exits=tuple(d.get("exits", ALL_EXITS)),
                pool_size=int(d.get("pool_size", 7)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError("config", f"malformed config: {exc}") from None

    def config_hash(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


def load_config(path: str | Path) -> ModelConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path} does not contain a mapping")
    return ModelConfig.from_dict(data)


def save_config(config: ModelConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)


def _stages(channels, conv_blocks, sa_blocks, widening, strides=(2, 2, 2, 2)):
    return tuple(
        StageConfig(channels=c, conv_blocks=n, sa_blocks=s, sa_heads=2 ** i, widening=widening, stride=st)
        for i, (c, n, s, st) in enumerate(zip(channels, conv_blocks, sa_blocks, strides))
    )


def _round8(x: float) -> int:
    return max(8, int(round(x / 8.0)) * 8)


# Appendix rows: (name, width factor / size, L0, SA blocks, widening)
_RESNET_ROWS = [
    (1, 0.375, 128, (3, 3, 9, 3), 4),
    (2, 0.5, 128, (3, 3, 9, 9), 4),
    (3, 0.5, 256, (3, 3, 9, 3), 4),
    (4, 0.625, 192, (3, 3, 9, 3), 4),
    (5, 0.75, 128, (3, 3, 9, 3), 2),
]
# RegNet-Y stage widths and depths at the listed sizes.
_REGNET_SIZES = {
    "400M": ((48, 104, 208, 440), (1, 3, 6, 6)),
    "800M": ((64, 144, 320, 768), (1, 3, 7, 5)),
    "1.6G": ((48, 120, 336, 888), (2, 6, 17, 2)),
    "3.2G": ((72, 216, 576, 1512), (2, 5, 13, 1)),
}
_REGNET_ROWS = [
    (1, "400M", 128, (6, 6, 9, 9), 4),
    (2, "400M", 256, (3, 3, 9, 9), 4),
    (3, "800M", 128, (3, 3, 9, 6), 4),
    (4, "800M", 256, (3, 3, 9, 6), 4),
    (5, "1.6G", 256, (6, 6, 9, 6), 2),
    (6, "3.2G", 256, (6, 6, 9, 9), 4),
]
_MOBILENET_ROWS = [
    (1, 0.75, 128, (3, 3, 9, 9), 4),
    (2, 1.0, 128, (3, 3, 9, 9), 4),
    (3, 1.0, 128, (6, 6, 9, 9), 4),
    (4, 1.25, 128, (6, 6, 9, 9), 4),
    (5, 1.5, 256, (3, 3, 9, 9), 4),
]
# Widths are scaled to desk size: ResNet-50 [256,512,1024,2048] / 8, RegNet / 4,
# MobileNet-v3 [24,40,112,160] as-is, all rounded to multiples of 8.
_PRESET_IMAGE = ImageSpec(channels=3, height=64, width=64)


def _build_presets() -> dict[str, ModelConfig]:
    presets = {
        "tiny": ModelConfig(
            name="tiny", num_classes=4, latent_tokens=16, image=ImageSpec(1, 16, 16),
            stages=_stages((4, 8, 16, 32), (1, 1, 1, 1), (1, 1, 1, 1), 4, strides=(1, 1, 2, 2)),
        ),
        "toy": ModelConfig(
            name="toy", num_classes=8, latent_tokens=16, image=ImageSpec(1, 32, 32),
            stages=_stages((8, 16, 32, 64), (1, 1, 1, 1), (1, 1, 1, 1), 2, strides=(1, 2, 2, 2)),
        ),
    }
    for idx, wf, L, sa, widen in _RESNET_ROWS:
        ch = tuple(_round8(c * wf / 8) for c in (256, 512, 1024, 2048))
        presets[f"resnet-model-{idx}-style"] = ModelConfig(
            name=f"resnet-model-{idx}-style", num_classes=1000, latent_tokens=L, image=_PRESET_IMAGE,
            stages=_stages(ch, (3, 4, 6, 3), sa, widen))
    for idx, size, L, sa, widen in _REGNET_ROWS:
        widths, depths = _REGNET_SIZES[size]
        ch = tuple(_round8(c / 4) for c in widths)
        presets[f"regnet-model-{idx}-style"] = ModelConfig(
            name=f"regnet-model-{idx}-style", num_classes=1000, latent_tokens=L, image=_PRESET_IMAGE,
            stages=_stages(ch, depths, sa, widen))
    for idx, wf, L, sa, widen in _MOBILENET_ROWS:
        ch = tuple(_round8(c * wf) for c in (24, 40, 112, 160))
        presets[f"mobilenet-model-{idx}-style"] = ModelConfig(
            name=f"mobilenet-model-{idx}-style", num_classes=1000, latent_tokens=L, image=_PRESET_IMAGE,
            stages=_stages(ch, (2, 3, 4, 6), sa, widen))
    return presets


PRESETS = _build_presets()


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
