"""Dense layer primitives with explicit forward/backward passes.

Arrays are plain ``numpy.ndarray`` in float64.  Every layer caches what its
backward needs during ``forward`` and accumulates parameter gradients into
``self.grads`` during ``backward``.  Conv and batchnorm layers work on batched
``(batch, channels, time)`` input; a 2-D ``(channels, time)`` input is treated
as a batch of one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import kernels

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Base class: named parameters, gradients, children and a train/eval flag."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    def children(self) -> dict[str, "Module"]:
        return {}

    def add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = as_tensor(value)
        self.grads[name] = np.zeros_like(self.params[name])

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, "Module", str]]:
        """Yield ``(qualified_name, owner, local_name)`` for every parameter."""
        for name in self.params:
            yield prefix + name, self, name
        for cname, child in self.children().items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "Module", str]]:
        for name in self.buffers:
            yield prefix + name, self, name
        for cname, child in self.children().items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def param_refs(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {q: (m.params[n], m.grads[n]) for q, m, n in self.named_parameters()}

    def num_parameters(self) -> int:
        return sum(m.params[n].size for _, m, n in self.named_parameters())

    def zero_grad(self) -> None:
        for _, m, n in self.named_parameters():
            m.grads[n].fill(0.0)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children().values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def clear_cache(self) -> None:
        self._cache = None
        for child in self.children().values():
            child.clear_cache()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {q: m.params[n] for q, m, n in self.named_parameters()}
        out.update({q: m.buffers[n] for q, m, n in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for q, m, n in self.named_parameters():
            if m.params[n].shape != state[q].shape:
                raise ValueError(f"shape mismatch for {q}: {m.params[n].shape} vs {state[q].shape}")
            m.params[n][...] = state[q]
        for q, m, n in self.named_buffers():
            m.buffers[n][...] = state[q]


# ---------------------------------------------------------------------------
# convolution

def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = as_tensor(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected (channels, time) or (batch, channels, time), got {x.shape}")
    return x, False


def _im2col(xp: np.ndarray, width: int, t: int) -> np.ndarray:
    # xp: (B, C, t + width - 1) -> (B * t, C * width)
    win = np.lib.stride_tricks.sliding_window_view(xp, width, axis=2)  # (B, C, t, w)
    b, c = xp.shape[:2]
    return win.transpose(0, 2, 1, 3).reshape(b * t, c * width)


def conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Same-padded 1-D cross-correlation (no kernel flip).

    ``out[o, i] = bias[o] + sum_{c, j} weight[o, c, j] * x[c, i + j - (w - 1) // 2]``
    with zeros outside ``[0, t)``.
    """
    xb, squeeze = _as_batch(x)
    weight = as_tensor(weight)
    k_out, k_in, width = weight.shape
    if width % 2 == 0:
        raise ValueError(f"kernel width must be odd, got {width}")
    b, c, t = xb.shape
    if c != k_in:
        raise ValueError(f"input has {c} channels, weight expects {k_in}")
    pad = width // 2
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad)))
    cols = _im2col(xp, width, t)
    out = cols @ weight.reshape(k_out, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(b, t, k_out).transpose(0, 2, 1)
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


class Conv1d(Module):
    def __init__(self, k_in: int, k_out: int, width: int, rng: np.random.Generator | None = None,
                 bias: bool = True):
        super().__init__()
        if width % 2 == 0:
            raise ValueError(f"kernel width must be odd, got {width}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k_in, self.k_out, self.width = k_in, k_out, width
        self.add_param("weight", he_normal(rng, (k_out, k_in, width), k_in * width))
        if bias:
            self.add_param("bias", np.zeros(k_out))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        xb, squeeze = _as_batch(x)
        b, c, t = xb.shape
        if c != self.k_in:
            raise ValueError(f"input has {c} channels, layer expects {self.k_in}")
        pad = self.width // 2
        cols = _im2col(np.pad(xb, ((0, 0), (0, 0), (pad, pad))), self.width, t)
        w2 = self.params["weight"].reshape(self.k_out, -1)
        out = cols @ w2.T
        if "bias" in self.params:
            out += self.params["bias"]
        self._cache = (cols, b, t, squeeze)
        out = np.ascontiguousarray(out.reshape(b, t, self.k_out).transpose(0, 2, 1))
        return out[0] if squeeze else out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        cols, b, t, squeeze = self._cache
        g = as_tensor(grad_out)
        if squeeze:
            g = g[None]
        g2 = g.transpose(0, 2, 1).reshape(b * t, self.k_out)
        self.grads["weight"] += (g2.T @ cols).reshape(self.params["weight"].shape)
        if "bias" in self.params:
            self.grads["bias"] += g2.sum(axis=0)
        # input gradient is a correlation of g with the flipped, channel-swapped kernel
        pad = self.width // 2
        gcols = _im2col(np.pad(g, ((0, 0), (0, 0), (pad, pad))), self.width, t)
        w_t = self.params["weight"][:, :, ::-1].transpose(1, 0, 2).reshape(self.k_in, -1)
        gx = np.ascontiguousarray((gcols @ w_t.T).reshape(b, t, self.k_in).transpose(0, 2, 1))
        return gx[0] if squeeze else gx


# ---------------------------------------------------------------------------
# batch normalisation

class BatchNorm1d(Module):
    """Per-channel normalisation over the batch and time axes."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.add_param("gamma", np.ones(channels))
        self.add_param("beta", np.zeros(channels))
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        xb, squeeze = _as_batch(x)
        gamma = self.params["gamma"][None, :, None]
        beta = self.params["beta"][None, :, None]
        if self.training:
            count = xb.shape[0] * xb.shape[2]
            if count <= 1:
                raise ValueError("batchnorm in train mode needs more than one value per channel")
            mean = xb.mean(axis=(0, 2))
            var = xb.var(axis=(0, 2))
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1.0 - self.momentum
            rm += self.momentum * mean
            rv *= 1.0 - self.momentum
            rv += self.momentum * var * count / (count - 1)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (xb - mean[None, :, None]) * inv_std[None, :, None]
        self._cache = (xhat, inv_std, squeeze, self.training)
        out = gamma * xhat + beta
        return out[0] if squeeze else out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        xhat, inv_std, squeeze, training = self._cache
        g = as_tensor(grad_out)
        if squeeze:
            g = g[None]
        self.grads["gamma"] += (g * xhat).sum(axis=(0, 2))
        self.grads["beta"] += g.sum(axis=(0, 2))
        gxhat = g * self.params["gamma"][None, :, None]
        if training:
            gx = inv_std[None, :, None] * (
                gxhat
                - gxhat.mean(axis=(0, 2), keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=(0, 2), keepdims=True)
            )
        else:
            gx = gxhat * inv_std[None, :, None]
        return gx[0] if squeeze else gx

    def folded(self) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode affine map as ``(scale, shift)`` per channel."""
        scale = self.params["gamma"] / np.sqrt(self.buffers["running_var"] + self.eps)
        shift = self.params["beta"] - self.buffers["running_mean"] * scale
        return scale, shift


# ---------------------------------------------------------------------------
# dense

class Linear(Module):
    def __init__(self, m: int, out: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.m, self.out = m, out
        self.add_param("weight", he_normal(rng, (out, m), m))
        self.add_param("bias", np.zeros(out))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = as_tensor(x)
        squeeze = x.ndim == 1
        xb = x[None] if squeeze else x
        if xb.shape[1] != self.m:
            raise ValueError(f"input width {xb.shape[1]} does not match weight columns {self.m}")
        self._cache = (xb, squeeze)
        out = xb @ self.params["weight"].T + self.params["bias"]
        return out[0] if squeeze else out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        xb, squeeze = self._cache
        g = as_tensor(grad_out)
        g = g[None] if squeeze else g
        self.grads["weight"] += g.T @ xb
        self.grads["bias"] += g.sum(axis=0)
        gx = g @ self.params["weight"]
        return gx[0] if squeeze else gx


class ReLU(Module):
    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * self._cache


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def children(self) -> dict[str, Module]:
        return {str(i): layer for i, layer in enumerate(self.layers)}

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


# ---------------------------------------------------------------------------
# probabilities and losses

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given the gradient w.r.t. ``softmax(logits)``."""
    return probs * (grad_probs - (grad_probs * probs).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, targets, class_weights=None) -> tuple[float, np.ndarray]:
    """Class-weighted mean negative log-likelihood and its gradient w.r.t. logits.

    The batch reduction is ``sum_i w[y_i] * nll_i / sum_i w[y_i]``; with unit
    weights this is the plain batch mean.
    """
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = logits[None]
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if b == 0:
        raise ValueError("cross_entropy on an empty batch")
    if targets.shape[0] != b:
        raise ValueError("targets and logits disagree on batch size")
    if np.any(targets < 0) or np.any(targets >= c):
        raise ValueError(f"targets must lie in [0, {c})")
    w = np.ones(c) if class_weights is None else as_tensor(class_weights)
    if np.any(w <= 0):
        raise ValueError("class weights must be positive")
    ws = w[targets]
    logp = log_softmax(logits)
    nll = -logp[np.arange(b), targets]
    denom = ws.sum()
    loss = float((ws * nll).sum() / denom)
    grad = softmax(logits)
    grad[np.arange(b), targets] -= 1.0
    grad *= (ws / denom)[:, None]
    return loss, grad


# ---------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}; Adam step aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        if not (p.flags.c_contiguous and g.flags.c_contiguous):
            raise ValueError(f"parameter {name!r} and its gradient must be contiguous")
        kernels.adam_update(p.reshape(-1), g.reshape(-1), state.m[name].reshape(-1), state.v[name].reshape(-1),
                            state.lr, b1, b2, state.eps, c1, c2)
    return params


class Adam:
    """Adam over a fixed set of ``(param, grad)`` array pairs, updated in place."""

    def __init__(self, refs: dict[str, tuple[np.ndarray, np.ndarray]], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.refs = refs
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        params = {k: p for k, (p, _) in self.refs.items()}
        grads = {k: g for k, (_, g) in self.refs.items()}
        adam_step(params, grads, self.state)


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    nonsmooth: list[tuple[int, ...]]
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def checkable(self) -> bool:
        return not self.nonsmooth


def finite_diff_check(f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray,
                      h: float = 1e-5, kink_tol: float = 1e-3) -> GradCheckReport:
    """Compare an analytic gradient with central differences of scalar ``f`` at ``x``.

    The error is ``max_i |a_i - n_i| / max(max|a|, max|n|)``, i.e. relative to
    the gradient's scale so that near-zero entries do not dominate.  Entries
    whose one-sided differences disagree by more than ``kink_tol`` (relative to
    that scale) are reported in ``nonsmooth`` and excluded from the error.

    ``x`` is perturbed in place and restored.
    """
    x_flat = x.reshape(-1)
    numeric = np.zeros(x.size)
    fwd = np.zeros(x.size)
    bwd = np.zeros(x.size)
    f0 = f(x)
    for i in range(x.size):
        orig = x_flat[i]
        x_flat[i] = orig + h
        fp = f(x)
        x_flat[i] = orig - h
        fm = f(x)
        x_flat[i] = orig
        numeric[i] = (fp - fm) / (2 * h)
        fwd[i] = (fp - f0) / h
        bwd[i] = (f0 - fm) / h
    a = np.asarray(analytic, dtype=DTYPE).reshape(-1)
    scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-300)
    kinks = np.abs(fwd - bwd) > kink_tol * max(scale, 1e-12)
    diff = np.where(kinks, 0.0, np.abs(a - numeric))
    nonsmooth = [tuple(int(v) for v in np.unravel_index(i, x.shape)) for i in np.flatnonzero(kinks)]
    return GradCheckReport(float(diff.max(initial=0.0) / scale), nonsmooth,
                           a.reshape(x.shape), numeric.reshape(x.shape))
