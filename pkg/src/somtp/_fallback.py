"""Pure-Python versions of the kernels in ``_core.pyx``.

Used when the compiled extension is unavailable or when ``SOMTP_PURE_PYTHON=1``.
The inner loops run on Python floats (row lists) because the matrices are
narrow (``L`` is the segment count) and per-element numpy indexing is slower.
"""
from __future__ import annotations

import math

import numpy as np

INF = math.inf


def _softmin2(a: float, b: float, gamma: float) -> float:
    m = a if a < b else b
    if gamma == 0.0 or m == INF:
        return m
    return m - gamma * math.log(math.exp(-(a - m) / gamma) + math.exp(-(b - m) / gamma))


def softdtw_forward_batch(D: np.ndarray, gamma: float) -> np.ndarray:
    B, L, T = D.shape
    out = np.full((B, L + 2, T + 2), np.inf)
    for b in range(B):
        d = D[b].tolist()
        prev = [0.0] + [INF] * T  # row l - 1, columns 0..T
        rows = [prev]
        for l in range(1, L + 1):
            cur = [INF] * (T + 1)
            dl = d[l - 1]
            for t in range(1, T + 1):
                cur[t] = dl[t - 1] + _softmin2(prev[t - 1], cur[t - 1], gamma)
            rows.append(cur)
            prev = cur
        out[b, : L + 1, : T + 1] = rows
    return out


def softdtw_backward_batch(D: np.ndarray, R: np.ndarray, gamma: float) -> np.ndarray:
    B, L, T = D.shape
    out = np.zeros((B, L + 2, T + 2))
    exp = math.exp
    for b in range(B):
        r = R[b].tolist()
        for row in r:
            row[T + 1] = -INF
        r[L + 1] = [-INF] * (T + 2)
        r[L + 1][T + 1] = r[L][T]
        d = [[0.0] * (T + 2) for _ in range(L + 2)]
        for l in range(L):
            d[l + 1][1:T + 1] = D[b, l].tolist()
        e = [[0.0] * (T + 2) for _ in range(L + 2)]
        e[L + 1][T + 1] = 1.0
        for l in range(L, 0, -1):
            rl, rn, el, en = r[l], r[l + 1], e[l], e[l + 1]
            dl, dn = d[l], d[l + 1]
            for t in range(T, 0, -1):
                rlt = rl[t]
                if rlt == INF:
                    continue
                a = exp((rl[t + 1] - rlt - dl[t + 1]) / gamma)
                c = exp((rn[t + 1] - rlt - dn[t + 1]) / gamma)
                el[t] = a * el[t + 1] + c * en[t + 1]
        out[b] = e
    return out


def backtrack_batch(R: np.ndarray, L: int, T: int) -> np.ndarray:
    B = R.shape[0]
    lengths = np.zeros((B, L), dtype=np.int64)
    for b in range(B):
        r = R[b]
        l, t = L, T
        while t >= 1:
            lengths[b, l - 1] += 1
            if t == 1:
                break
            # ties go to the diagonal predecessor
            if r[l - 1, t - 1] <= r[l, t - 1]:
                l -= 1
            t -= 1
    return lengths


def segment_pool_batch(H: np.ndarray, bounds: np.ndarray, use_max: bool):
    B, K, _ = H.shape
    n = bounds.shape[1] - 1
    out = np.zeros((B, K, n))
    arg = np.full((B, K, n), -1, dtype=np.int64)
    for b in range(B):
        for s in range(n):
            lo, hi = int(bounds[b, s]), int(bounds[b, s + 1])
            seg = H[b, :, lo:hi]
            if use_max:
                idx = seg.argmax(axis=1)  # first occurrence on ties
                arg[b, :, s] = lo + idx
                out[b, :, s] = seg[np.arange(K), idx]
            else:
                out[b, :, s] = seg.sum(axis=1) / (hi - lo)
    return out, arg


def adam_update(p, g, m, v, lr, beta1, beta2, eps, c1, c2):
    # vectorised rather than scalar: parameter vectors run into the millions
    tmp = np.multiply(g, 1.0 - beta1)
    m *= beta1
    m += tmp
    np.multiply(g, g, out=tmp)
    tmp *= 1.0 - beta2
    v *= beta2
    v += tmp
    np.sqrt(v, out=tmp)
    tmp *= 1.0 / math.sqrt(c2)
    tmp += eps
    np.divide(m, tmp, out=tmp)
    tmp *= lr / c1
    p -= tmp
