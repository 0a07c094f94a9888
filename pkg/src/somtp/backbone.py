"""FCN / ResNet convolutional encoders and the fully connected heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import BatchNorm1d, Conv1d, Linear, Module, ReLU, Sequential


@dataclass(frozen=True)
class BackboneSpec:
    kind: str
    d: int
    widths: tuple[int, ...]
    kernels: tuple[int, ...]

    @property
    def k(self) -> int:
        return self.widths[-1]


def fcn_spec(d: int, widths=(128, 256, 256), kernels=(9, 5, 3)) -> BackboneSpec:
    return BackboneSpec("fcn", d, tuple(widths), tuple(kernels))


def resnet_spec(d: int, widths=(64, 128, 256), kernels=(9, 5, 3)) -> BackboneSpec:
    # one width per residual block; every block uses the full kernel triple
    return BackboneSpec("resnet", d, tuple(widths), tuple(kernels))


class ResidualBlock(Module):
    """Three conv+bn layers with ReLU between, a shortcut, and ReLU after the sum."""

    def __init__(self, k_in: int, k_out: int, kernels: tuple[int, ...], rng: np.random.Generator):
        super().__init__()
        layers: list[Module] = []
        width_in = k_in
        for i, w in enumerate(kernels):
            layers += [Conv1d(width_in, k_out, w, rng), BatchNorm1d(k_out)]
            if i < len(kernels) - 1:
                layers.append(ReLU())
            width_in = k_out
        self.branch = Sequential(*layers)
        self.shortcut = Sequential(Conv1d(k_in, k_out, 1, rng), BatchNorm1d(k_out)) if k_in != k_out else None
        self.out_relu = ReLU()
        self._cache = None

    def children(self) -> dict[str, Module]:
        out = {"branch": self.branch, "out_relu": self.out_relu}
        if self.shortcut is not None:
            out["shortcut"] = self.shortcut
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        u = self.branch.forward(x)
        v = self.shortcut.forward(x) if self.shortcut is not None else x
        self._cache = (u, v)
        return self.out_relu.forward(u + v)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        g = self.out_relu.backward(grad)
        gx = self.branch.backward(g)
        gx = gx + (self.shortcut.backward(g) if self.shortcut is not None else g)
        return gx


class Encoder(Sequential):
    def __init__(self, spec: BackboneSpec, *layers: Module):
        super().__init__(*layers)
        self.spec = spec

    @property
    def k(self) -> int:
        return self.spec.k


def build_fcn(d: int, rng: np.random.Generator | None = None, spec: BackboneSpec | None = None) -> Encoder:
    """Conv+BN+ReLU stack; widths (128, 256, 256), kernels (9, 5, 3) by default."""
    if d < 1:
        raise ValueError("need at least one input channel")
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = spec if spec is not None else fcn_spec(d)
    layers: list[Module] = []
    k_in = d
    for width, kernel in zip(spec.widths, spec.kernels):
        layers += [Conv1d(k_in, width, kernel, rng), BatchNorm1d(width), ReLU()]
        k_in = width
    return Encoder(spec, *layers)


def build_resnet(d: int, rng: np.random.Generator | None = None, spec: BackboneSpec | None = None) -> Encoder:
    """Three residual blocks (64, 128, 256 channels), each with kernels (9, 5, 3)."""
    if d < 1:
        raise ValueError("need at least one input channel")
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = spec if spec is not None else resnet_spec(d)
    blocks = []
    k_in = d
    for width in spec.widths:
        blocks.append(ResidualBlock(k_in, width, spec.kernels, rng))
        k_in = width
    return Encoder(spec, *blocks)


def build_encoder(kind: str, d: int, rng: np.random.Generator | None = None,
                  widths: tuple[int, ...] | None = None, kernels: tuple[int, ...] | None = None) -> Encoder:
    if kind == "fcn":
        spec = fcn_spec(d, widths or (128, 256, 256), kernels or (9, 5, 3))
        return build_fcn(d, rng, spec)
    if kind == "resnet":
        spec = resnet_spec(d, widths or (64, 128, 256), kernels or (9, 5, 3))
        return build_resnet(d, rng, spec)
    raise ValueError(f"unknown backbone {kind!r} (expected 'fcn' or 'resnet')")


@dataclass(frozen=True)
class HeadSpec:
    in_width: int
    hidden: tuple[int, ...]
    classes: int

    @property
    def dims(self) -> list[tuple[int, int]]:
        sizes = [self.in_width, *self.hidden, self.classes]
        return list(zip(sizes[:-1], sizes[1:]))


def build_head(spec: HeadSpec, rng: np.random.Generator | None = None) -> Sequential:
    """Linear layers with ReLU between; emits logits (softmax is applied by the caller)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    layers: list[Module] = []
    dims = spec.dims
    for i, (a, b) in enumerate(dims):
        layers.append(Linear(a, b, rng))
        if i < len(dims) - 1:
            layers.append(ReLU())
    return Sequential(*layers)


def build_heads(n: int, C: int, k: int = 256, hidden: tuple[int, ...] = (512, 1024),
                rng: np.random.Generator | None = None) -> tuple[Sequential, Sequential]:
    """CLS head over ``k * n`` inputs and DPLN head over ``k * n * 3`` inputs."""
    if n < 1 or C < 2:
        raise ValueError("need n >= 1 and at least two classes")
    rng = rng if rng is not None else np.random.default_rng(0)
    cls_head = build_head(HeadSpec(k * n, tuple(hidden), C), rng)
    dpln_head = build_head(HeadSpec(k * n * 3, tuple(hidden), C), rng)
    return cls_head, dpln_head
