"""Run configuration: a flat JSON document whose keys are RunConfig fields."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields

from .model import POOLINGS, ModelConfig
from .pooling import OPS


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


@dataclass
class RunConfig:
    backbone: str = "fcn"
    pooling: str = "somtp"
    gtp_op: str = "avg"
    stp_op: str = "avg"
    dtp_op: str = "max"
    selection_op: str = "max"
    n: int = 4
    lam: float = 0.1
    gamma: float = 1.0
    lr: float = 1e-4
    batch_size: int | None = None
    epochs: int = 300
    seed: int = 10
    per_sample_selection: bool = False
    normalize: bool = False
    val_fraction: float = 0.2
    target_val_acc: float | None = None
    window: int = 1
    widths: list[int] | None = None
    kernels: list[int] | None = None
    hidden: list[int] | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(msg):
            raise ConfigError(msg)

        if self.backbone not in ("fcn", "resnet"):
            bad(f"backbone must be 'fcn' or 'resnet', got {self.backbone!r}")
        if self.pooling not in POOLINGS:
            bad(f"pooling must be one of {list(POOLINGS)}, got {self.pooling!r}")
        for name in ("gtp_op", "stp_op", "dtp_op", "selection_op"):
            if getattr(self, name) not in OPS:
                bad(f"{name} must be 'max' or 'avg', got {getattr(self, name)!r}")
        if not isinstance(self.n, int) or self.n < 1:
            bad(f"n must be an integer >= 1, got {self.n!r}")
        if not _finite(self.lam) or self.lam < 0:
            bad(f"lam must be a finite number >= 0, got {self.lam!r}")
        if not _finite(self.gamma) or self.gamma <= 0:
            bad(f"gamma must be > 0, got {self.gamma!r}")
        if not _finite(self.lr) or self.lr <= 0:
            bad(f"lr must be > 0, got {self.lr!r}")
        if self.batch_size is not None and (not isinstance(self.batch_size, int) or self.batch_size < 1):
            bad(f"batch_size must be a positive integer or null, got {self.batch_size!r}")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            bad(f"epochs must be a positive integer, got {self.epochs!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            bad(f"seed must be a non-negative integer, got {self.seed!r}")
        if not _finite(self.val_fraction) or not 0.0 < self.val_fraction < 1.0:
            bad(f"val_fraction must lie in (0, 1), got {self.val_fraction!r}")
        if self.target_val_acc is not None and not (_finite(self.target_val_acc) and 0 < self.target_val_acc <= 1):
            bad(f"target_val_acc must lie in (0, 1] or be null, got {self.target_val_acc!r}")
        if not isinstance(self.window, int) or self.window < 1:
            bad(f"window must be a positive integer, got {self.window!r}")
        for name in ("widths", "kernels", "hidden"):
            v = getattr(self, name)
            if v is not None and (not isinstance(v, (list, tuple)) or not v
                                  or not all(isinstance(i, int) and i > 0 for i in v)):
                bad(f"{name} must be a non-empty list of positive integers or null")
        if self.kernels is not None and any(k % 2 == 0 for k in self.kernels):
            bad("kernel widths must be odd")

    def batch_for(self, n_train: int) -> int:
        """Configured batch size, else 8, or ceil(N / 10) for training sets under 80."""
        if self.batch_size is not None:
            return self.batch_size
        return max(1, math.ceil(n_train / 10)) if n_train < 80 else 8

    def model_config(self, d: int, C: int, t: int) -> ModelConfig:
        return ModelConfig(
            d=d, C=C, t=t, pooling=self.pooling, backbone=self.backbone, n=self.n,
            gtp_op=self.gtp_op, stp_op=self.stp_op, dtp_op=self.dtp_op, selection_op=self.selection_op,
            gamma=self.gamma, per_sample_selection=self.per_sample_selection,
            widths=tuple(self.widths) if self.widths else None,
            kernels=tuple(self.kernels) if self.kernels else None,
            hidden=tuple(self.hidden) if self.hidden else (512, 1024),
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object of key/value pairs")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; valid keys are {sorted(known)}")
        raw = dict(raw)
        # JSON has no int/float distinction worth enforcing for real-valued keys
        for name in ("lam", "gamma", "lr", "val_fraction", "target_val_acc"):
            if isinstance(raw.get(name), bool):
                raise ConfigError(f"{name} must be a number")
            if isinstance(raw.get(name), int):
                raw[name] = float(raw[name])
        for name in ("n", "batch_size", "epochs", "seed", "window"):
            if isinstance(raw.get(name), bool):
                raise ConfigError(f"{name} must be an integer")
        for name in ("per_sample_selection", "normalize"):
            if name in raw and not isinstance(raw[name], bool):
                raise ConfigError(f"{name} must be true or false")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _finite(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> RunConfig:
    """Read a config file (or defaults when ``path`` is None) and apply overrides."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if overrides:
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object of key/value pairs")
        raw = {**raw, **overrides}
    return RunConfig.from_dict(raw)


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
