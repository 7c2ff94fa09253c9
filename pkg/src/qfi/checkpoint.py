"""Binary checkpoint file: magic "QFIM", explicit version, little-endian
f32 tensor payloads, f64 observer states, and a canonical-JSON metadata
block. Load-then-save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .layers import ModelGraph, build_ccdf
from .train import Checkpoint

MAGIC = b"QFIM"
VERSION = 1

MODEL_BUILDERS = {"ccdf": build_ccdf}


class CheckpointError(ValueError):
    """Raised for unreadable or incompatible checkpoint files."""


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    model = ckpt.model
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(model.name)]

    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, arr in params:
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    observers = model.observers()
    parts.append(struct.pack("<I", len(observers)))
    for tag, obs in observers:
        parts.append(_pack_str(tag))
        parts.append(struct.pack("<dd", obs.ema_absmax, obs.momentum))

    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":"))
    parts.append(_pack_str(meta))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes(), str(path))
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a QFIM checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    model_name = r.string()
    builder = MODEL_BUILDERS.get(model_name)
    if builder is None:
        raise CheckpointError(f"{path}: unknown model {model_name!r}")
    model: ModelGraph = builder()

    n_tensors = r.u32()
    for _ in range(n_tensors):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        try:
            model.set_parameter(name, arr.astype(np.float32))
        except KeyError:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}") from None

    n_obs = r.u32()
    obs_by_tag = dict(model.observers())
    for _ in range(n_obs):
        tag = r.string()
        ema, momentum = struct.unpack("<dd", r.take(16))
        obs = obs_by_tag.get(tag)
        if obs is None:
            raise CheckpointError(f"{path}: unexpected observer {tag!r}")
        obs.momentum = momentum
        obs.ema_absmax = ema
        obs.freeze()

    metadata = json.loads(r.string())
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    model.freeze()
    return Checkpoint(model=model, metadata=metadata)
