"""Soft-DTW alignment of learnable prototypes against hidden features.

Only two transitions are allowed: from ``(l-1, t-1)`` (start a new segment) and
from ``(l, t-1)`` (stay on the same prototype).  Every time step is therefore
matched to exactly one prototype and each prototype covers a contiguous,
non-empty run of steps, which is what turns an alignment into a segmentation.

Cost matrices are ``(L, T)``; the accumulated matrix ``R`` and the soft
alignment ``E`` carry one boundary row/column on each side, ``(L+2, T+2)``,
with the interior at ``[1:L+1, 1:T+1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .numcore import Module, AdamState, adam_step, as_tensor


def min_gamma(values: Sequence[float], gamma: float) -> float:
    """Smoothed minimum ``-gamma * log(sum(exp(-a / gamma)))``; hard min at ``gamma == 0``."""
    a = np.asarray(values, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError("min_gamma of an empty set")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    m = float(a.min())
    if gamma == 0 or math.isinf(m):
        return m
    return m - gamma * math.log(float(np.exp(-(a - m) / gamma).sum()))


def cosine_distance(p, h) -> float:
    """``1 - cos(p, h)``; defined as 1 when either vector has zero norm."""
    p = np.asarray(p, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    np_, nh = np.linalg.norm(p), np.linalg.norm(h)
    if np_ == 0 or nh == 0:
        return 1.0
    return float(1.0 - p @ h / (np_ * nh))


def _unit_columns(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # normalises along axis -2 (the feature axis); zero columns stay zero
    norms = np.linalg.norm(X, axis=-2, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return X / safe, norms


def cost_matrix(P: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Cosine distances between prototype columns ``P (k, L)`` and feature columns.

    ``H`` is ``(k, T)`` or batched ``(B, k, T)``; the result is ``(L, T)`` or
    ``(B, L, T)``.
    """
    Pn, pnorm = _unit_columns(as_tensor(P))
    Hn, hnorm = _unit_columns(as_tensor(H))
    cos = np.einsum("kl,...kt->...lt", Pn, Hn)
    return 1.0 - cos


@dataclass
class Segmentation:
    """Ordered segment lengths partitioning ``[0, t)``."""

    lengths: tuple[int, ...]

    def __post_init__(self):
        self.lengths = tuple(int(v) for v in self.lengths)
        if not self.lengths or min(self.lengths) < 1:
            raise ValueError(f"segment lengths must be positive, got {self.lengths}")

    @property
    def n(self) -> int:
        return len(self.lengths)

    @property
    def t(self) -> int:
        return sum(self.lengths)

    @property
    def bounds(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.lengths)]).astype(np.int64)

    @classmethod
    def uniform(cls, t: int, n: int) -> "Segmentation":
        """Floor-boundary split: segment ``i`` covers ``[i*t//n, (i+1)*t//n)``."""
        if not 1 <= n <= t:
            raise ValueError(f"need 1 <= n <= t, got n={n}, t={t}")
        b = [(i * t) // n for i in range(n + 1)]
        return cls(tuple(b[i + 1] - b[i] for i in range(n)))


# ---------------------------------------------------------------------------
# forward / backward on precomputed cost matrices

def _check_costs(D: np.ndarray) -> np.ndarray:
    D = np.ascontiguousarray(D, dtype=np.float64)
    if D.ndim == 2:
        D = D[None]
    _, L, T = D.shape
    if L < 1 or L > T:
        raise ValueError(f"no valid alignment: {L} prototypes for {T} time steps (need 1 <= L <= T)")
    return D


def forward_costs(D: np.ndarray, gamma: float) -> np.ndarray:
    """Accumulated cost matrices ``R`` for a batch of cost matrices ``(B, L, T)``."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return kernels.softdtw_forward_batch(_check_costs(D), gamma)


def backward_costs(D: np.ndarray, R: np.ndarray, gamma: float) -> np.ndarray:
    """Soft alignment matrices ``E = dR[L,T] / dR[l,t]`` (equal to ``d value / d D``)."""
    if gamma <= 0:
        raise ValueError("soft-DTW backward is undefined for gamma == 0")
    D = _check_costs(D)
    R = np.ascontiguousarray(R, dtype=np.float64)
    if R.ndim == 2:
        R = R[None]
    return kernels.softdtw_backward_batch(D, R, gamma)


def values_from_R(R: np.ndarray) -> np.ndarray:
    return R[..., -2, -2]


def prototype_grad(P: np.ndarray, H: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Chain the soft alignment through the cosine-distance Jacobian.

    ``P`` is ``(k, L)``, ``H`` is ``(B, k, T)`` and ``E`` is ``(B, L+2, T+2)``;
    returns the summed gradient ``(k, L)`` over the batch.
    """
    P = as_tensor(P)
    H = as_tensor(H)
    if H.ndim == 2:
        H = H[None]
    if E.ndim == 2:
        E = E[None]
    L = P.shape[1]
    T = H.shape[2]
    Ei = E[:, 1:L + 1, 1:T + 1]
    Pn, pnorm = _unit_columns(P)
    Hn, _ = _unit_columns(H)
    cos = np.einsum("kl,bkt->blt", Pn, Hn)
    weighted_h = np.einsum("bkt,blt->kl", Hn, Ei)
    along_p = (Ei * cos).sum(axis=(0, 2))
    pn = pnorm[0]
    inv = np.where(pn > 0, 1.0 / np.where(pn > 0, pn, 1.0), 0.0)
    return -(weighted_h - Pn * along_p) * inv


# ---------------------------------------------------------------------------
# per-instance API

def softdtw_forward(P: np.ndarray, H: np.ndarray, gamma: float) -> tuple[np.ndarray, float]:
    """Fill the accumulated cost matrix for prototypes ``P (k, L)`` vs features ``H (k, T)``."""
    R = forward_costs(cost_matrix(P, H), gamma)[0]
    return R, float(R[-2, -2])


def softdtw_backward(P: np.ndarray, H: np.ndarray, R: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Return the soft alignment matrix ``E`` and the gradient of the soft-DTW value w.r.t. ``P``."""
    D = cost_matrix(P, H)
    E = backward_costs(D, R, gamma)[0]
    return E, prototype_grad(P, np.asarray(H)[None], E[None])


def extract_segments(R: np.ndarray) -> Segmentation:
    """Hard backtracking through ``R`` from ``(L, T)`` to ``(1, 1)``."""
    R = np.ascontiguousarray(R, dtype=np.float64)
    L, T = R.shape[0] - 2, R.shape[1] - 2
    return Segmentation(tuple(kernels.backtrack_batch(R[None], L, T)[0]))


def extract_segments_batch(R: np.ndarray) -> np.ndarray:
    """Segment lengths ``(B, L)`` for a batch of accumulated matrices."""
    R = np.ascontiguousarray(R, dtype=np.float64)
    return kernels.backtrack_batch(R, R.shape[1] - 2, R.shape[2] - 2)


# ---------------------------------------------------------------------------
# learnable prototypes

class Prototypes(Module):
    """``n`` learnable prototype vectors stored as the columns of a ``(k, n)`` matrix."""

    def __init__(self, k: int, n: int, rng: np.random.Generator | None = None, gamma: float = 1.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k, self.n, self.gamma = k, n, gamma
        self.add_param("P", rng.normal(0.0, 1.0, size=(k, n)))
        self._cache = None

    def align(self, H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Segment lengths ``(B, n)`` and soft-DTW values ``(B,)`` for a batch ``H (B, k, T)``."""
        D = cost_matrix(self.params["P"], H)
        R = forward_costs(D, self.gamma)
        self._cache = (np.array(H, copy=True), D, R)
        return extract_segments_batch(R), values_from_R(R).copy()

    def loss_backward(self) -> float:
        """Accumulate ``d L_proto / d P`` for the last aligned batch; returns ``L_proto``."""
        H, D, R = self._cache
        E = backward_costs(D, R, self.gamma)
        B = H.shape[0]
        self.grads["P"] += prototype_grad(self.params["P"], H, E) / B
        return float(values_from_R(R).mean())


def prototype_loss_and_step(P: np.ndarray, Hs: np.ndarray, gamma: float,
                            state: AdamState) -> tuple[np.ndarray, float]:
    """Mean soft-DTW loss over a batch and one Adam step on ``P`` (in place)."""
    Hs = as_tensor(Hs)
    if Hs.ndim == 2:
        Hs = Hs[None]
    if Hs.shape[0] == 0:
        raise ValueError("empty batch")
    D = cost_matrix(P, Hs)
    R = forward_costs(D, gamma)
    E = backward_costs(D, R, gamma)
    loss = float(values_from_R(R).mean())
    grad = prototype_grad(P, Hs, E) / Hs.shape[0]
    adam_step({"P": P}, {"P": grad}, state)
    return P, loss
