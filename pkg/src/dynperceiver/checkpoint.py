"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"DYNPCKPT"
    version    u32
    hash       32 bytes  sha256 of the canonical model config
    cfg_len    u32, then cfg_len bytes of config JSON
    count      u32
    count records:
        path_len u32, path (utf-8)
        ndim u32, ndim x u64 dims
        float64 payload, little-endian, C order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import ContractError, FormatError
from .nn import Module

MAGIC = b"DYNPCKPT"
VERSION = 1


def encode_checkpoint(model: Module, config: ModelConfig) -> bytes:
    cfg = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    params = list(model.named_parameters())
    parts = [MAGIC, struct.pack("<I", VERSION), config.config_hash(),
             struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(params))]
    for path, p in params:
        name = path.encode()
        data = np.ascontiguousarray(p.data, dtype="<f8")
        parts += [struct.pack("<I", len(name)), name, struct.pack("<I", data.ndim),
                  struct.pack(f"<{data.ndim}Q", *data.shape), data.tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(raw: bytes) -> tuple[ModelConfig, bytes, dict[str, np.ndarray]]:
    """Return (config, stored hash, {path: array})."""
    r = _Reader(raw)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", len(MAGIC))
    stored_hash = r.take(32, "config hash")
    cfg_at = r.pos
    cfg_blob = r.take(r.u32("config length"), "config")
    try:
        config = ModelConfig.from_dict(json.loads(cfg_blob))
    except ValueError as exc:
        raise FormatError(f"unreadable config: {exc}", cfg_at) from None
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32("record count")):
        name = r.take(r.u32("path length"), "path").decode()
        ndim = r.u32("ndim")
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, "dims"))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * n, f"payload of {name}"), dtype="<f8").reshape(shape).copy()
    if r.pos != len(raw):
        raise FormatError("trailing bytes after last record", r.pos)
    return config, stored_hash, tensors


def save_checkpoint(path, model: Module, config: ModelConfig) -> None:
    Path(path).write_bytes(encode_checkpoint(model, config))


def load_state(model: Module, config: ModelConfig, tensors: dict[str, np.ndarray], stored_hash: bytes) -> None:
    if stored_hash != config.config_hash():
        raise ContractError("checkpoint was written for a different model config")
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        raise ContractError(f"parameter mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, p in params.items():
        if p.data.shape != tensors[name].shape:
            raise ContractError(f"{name}: shape {tensors[name].shape} != {p.data.shape}")
        p.data = tensors[name].astype(np.float64)


def load_checkpoint(path):
    """Rebuild the model stored in ``path``; returns (model, config)."""
    from .model import DynPerceiver

    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror}", 0) from None
    config, stored_hash, tensors = decode_checkpoint(raw)
    model = DynPerceiver(config)
    load_state(model, config, tensors, stored_hash)
    return model, config
