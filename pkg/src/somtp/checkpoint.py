"""Binary checkpoints.

Layout (all integers little-endian)::

    b"SOMTP1"
    u32 len, utf-8 JSON meta      run config, model shape, labels, normalisation
    u32 len, utf-8 JSON rng       bit-generator state of the shuffling RNG
    u32 count
    count x tensor:
        u16 len, utf-8 name
        u8  dtype code            1 = float32
        u8  ndim
        ndim x u32 dims
        float32 payload (little-endian, C order)

Parameters live in float64 at run time; the trainer rounds the kept state to
float32 precision before saving, so a reload reproduces it bit for bit.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import ZNorm
from .model import ModelConfig, SoMTPModel

MAGIC = b"SOMTP1"
DTYPE_F32 = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint."""


@dataclass
class Checkpoint:
    run: RunConfig
    model_cfg: ModelConfig
    labels: tuple[str, ...]
    state: dict[str, np.ndarray]
    norm: ZNorm | None = None
    rng_state: dict | None = None
    extra: dict | None = None

    def build_model(self) -> SoMTPModel:
        model = SoMTPModel(self.model_cfg)
        expected = set(model.state_dict())
        missing, surplus = expected - set(self.state), set(self.state) - expected
        if missing or surplus:
            raise CheckpointError(f"checkpoint tensors do not match the model: missing {sorted(missing)}, "
                                  f"unexpected {sorted(surplus)}")
        model.load_state_dict(self.state)
        model.eval()
        return model


def _model_cfg_dict(cfg: ModelConfig) -> dict:
    out = dict(cfg.__dict__)
    for k in ("widths", "kernels", "hidden"):
        out[k] = list(out[k]) if out[k] is not None else None
    return out


def _model_cfg_from(raw: dict) -> ModelConfig:
    raw = dict(raw)
    for k in ("widths", "kernels", "hidden"):
        raw[k] = tuple(raw[k]) if raw.get(k) is not None else None
    if raw["hidden"] is None:
        raw.pop("hidden")
    return ModelConfig(**raw)


def _blob(fh, payload: bytes) -> None:
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def save_checkpoint(path: str | os.PathLike, model: SoMTPModel, run: RunConfig, labels, norm: ZNorm | None = None,
                    rng: np.random.Generator | None = None, extra: dict | None = None) -> None:
    meta = {
        "run": run.to_dict(),
        "model": _model_cfg_dict(model.cfg),
        "labels": list(labels),
        "norm": None if norm is None else {"mean": norm.mean.tolist(), "std": norm.std.tolist()},
        "extra": extra or {},
    }
    rng_state = rng.bit_generator.state if rng is not None else None
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _blob(fh, json.dumps(meta, sort_keys=True).encode())
        _blob(fh, json.dumps(rng_state, sort_keys=True).encode())
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            raw_name = name.encode()
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    r = _Reader(data, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        meta = json.loads(r.blob())
        rng_state = json.loads(r.blob())
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: corrupt metadata") from None
    (count,) = r.unpack("<I")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        code, ndim = r.unpack("<BB")
        if code != DTYPE_F32:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}I")
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        state[name] = arr.astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    norm = meta.get("norm")
    return Checkpoint(
        run=RunConfig.from_dict(meta["run"]),
        model_cfg=_model_cfg_from(meta["model"]),
        labels=tuple(meta["labels"]),
        state=state,
        norm=None if norm is None else ZNorm(np.array(norm["mean"]), np.array(norm["std"])),
        rng_state=rng_state,
        extra=meta.get("extra") or {},
    )
