"""Global, static and dynamic temporal pooling with recorded traces.

All operators take batched hidden features ``H (B, k, t)`` (a single
``(k, t)`` matrix is accepted too) and return ``(pooled (B, k, n), trace)``.
The trace keeps per-sample segment bounds and, for MAX, the absolute time
index that won each (channel, segment) cell; the lowest index wins ties.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .numcore import as_tensor
from .softdtw import Segmentation

OPS = ("max", "avg")


@dataclass
class PoolTrace:
    op: str
    bounds: np.ndarray  # (B, n + 1) int64
    argmax: np.ndarray | None  # (B, k, n) absolute time indices, MAX only
    t: int

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.bounds, axis=1)


def _batch(H):
    H = as_tensor(H)
    if H.ndim == 2:
        return H[None], True
    if H.ndim != 3:
        raise ValueError(f"expected (k, t) or (B, k, t) features, got shape {H.shape}")
    return H, False


def _check_op(op: str) -> None:
    if op not in OPS:
        raise ValueError(f"pooling op must be one of {OPS}, got {op!r}")


def pool_segments(H: np.ndarray, bounds: np.ndarray, op: str) -> tuple[np.ndarray, PoolTrace]:
    """Reduce each ``[bounds[b, i], bounds[b, i+1])`` window per channel."""
    _check_op(op)
    Hb, squeeze = _batch(H)
    B, _, t = Hb.shape
    bounds = np.ascontiguousarray(np.broadcast_to(np.asarray(bounds, dtype=np.int64), (B, np.shape(bounds)[-1])))
    if np.any(bounds[:, 0] != 0) or np.any(bounds[:, -1] != t) or np.any(np.diff(bounds, axis=1) < 1):
        raise ValueError(f"segments must cover [0, {t}) with positive lengths")
    out, arg = kernels.segment_pool_batch(np.ascontiguousarray(Hb), bounds, op == "max")
    trace = PoolTrace(op, bounds, arg if op == "max" else None, t)
    return (out[0] if squeeze else out), trace


def gtp(H: np.ndarray, op: str = "max") -> tuple[np.ndarray, PoolTrace]:
    """Global pooling over the whole time axis: ``(k, 1)`` per sample."""
    t = np.shape(H)[-1]
    if t < 1:
        raise ValueError("empty time axis")
    return pool_segments(H, np.array([0, t]), op)


def stp_bounds(t: int, n: int) -> np.ndarray:
    return Segmentation.uniform(t, n).bounds


def stp(H: np.ndarray, n: int, op: str = "max") -> tuple[np.ndarray, PoolTrace]:
    """Static pooling over ``n`` floor-bounded equal segments."""
    t = np.shape(H)[-1]
    if n > t:
        raise ValueError(f"cannot split {t} steps into {n} segments")
    return pool_segments(H, stp_bounds(t, n), op)


def dtp(H: np.ndarray, seg, op: str = "max") -> tuple[np.ndarray, PoolTrace]:
    """Dynamic pooling over given segment lengths.

    ``seg`` is a :class:`Segmentation` (shared by the batch) or an integer
    array of per-sample lengths ``(B, n)``.
    """
    t = np.shape(H)[-1]
    lengths = np.asarray(seg.lengths if isinstance(seg, Segmentation) else seg, dtype=np.int64)
    if lengths.ndim == 1:
        lengths = lengths[None]
    if np.any(lengths.sum(axis=1) != t):
        raise ValueError(f"segment lengths must sum to t={t}")
    bounds = np.concatenate([np.zeros((lengths.shape[0], 1), dtype=np.int64), np.cumsum(lengths, axis=1)], axis=1)
    return pool_segments(H, bounds, op)


def pool_backward(grad_out: np.ndarray, trace: PoolTrace) -> np.ndarray:
    """Route pooled gradients back onto the time axis.

    MAX sends each gradient to its recorded argmax; AVG spreads ``g / len``
    uniformly over the segment.  Also used for relevance routing, since both
    rules conserve the total exactly.
    """
    g = as_tensor(grad_out)
    squeeze = g.ndim == 2
    if squeeze:
        g = g[None]
    B, k, n = g.shape
    out = np.zeros((B, k, trace.t))
    if trace.op == "max":
        bi = np.arange(B)[:, None, None]
        ki = np.arange(k)[None, :, None]
        np.add.at(out, (np.broadcast_to(bi, g.shape), np.broadcast_to(ki, g.shape), trace.argmax), g)
    else:
        lengths = trace.lengths  # (B, n)
        seg_id = np.zeros((B, trace.t), dtype=np.int64)
        for b in range(B):
            seg_id[b] = np.repeat(np.arange(n), lengths[b])
        scaled = g / lengths[:, None, :]
        out = np.take_along_axis(scaled, np.broadcast_to(seg_id[:, None, :], (B, k, trace.t)), axis=2)
    return out[0] if squeeze else out
