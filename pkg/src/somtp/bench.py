"""Timing harnesses: pooling cost versus series length, and compiled versus
pure-Python kernels."""
from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from . import _fallback, kernels, pooling
from .model import Attention, build_pbar, select_blocks
from .softdtw import Prototypes

POOL_OPS = ("gtp", "stp", "dtp", "somtp")


def _best_time(fn, repeats: int) -> float:
    # minimum over repeats is the least noisy estimate of the intrinsic cost
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


@dataclass
class PoolingTiming:
    t: int
    op: str
    seconds: float


def bench_pooling(t_values=(256, 512, 1024, 2048, 4096), k: int = 256, n: int = 4, batch: int = 8,
                  repeats: int = 5, seed: int = 0) -> list[PoolingTiming]:
    """Forward time of each pooling on random post-ReLU features ``(batch, k, t)``.

    ``dtp`` includes the soft-DTW alignment; ``somtp`` runs all three poolings,
    builds the bundle, scores it and selects a block.
    """
    rng = np.random.default_rng(seed)
    protos = Prototypes(k, n, rng)
    attention = Attention(k, n, rng)
    rows: list[PoolingTiming] = []
    for t in t_values:
        if t < n:
            raise ValueError(f"t={t} is shorter than n={n}")
        H = np.maximum(rng.normal(size=(batch, k, t)), 0.0)

        def run_dtp():
            lengths, _ = protos.align(H)
            return pooling.dtp(H, lengths, "max")

        def run_somtp():
            pg, _ = pooling.gtp(H, "avg")
            ps, _ = pooling.stp(H, n, "avg")
            pd, _ = run_dtp()
            A = attention.forward(build_pbar(pg, ps, pd))
            return select_blocks(A, n, "max")

        fns = {
            "gtp": lambda: pooling.gtp(H, "avg"),
            "stp": lambda: pooling.stp(H, n, "avg"),
            "dtp": run_dtp,
            "somtp": run_somtp,
        }
        for op in POOL_OPS:
            rows.append(PoolingTiming(t, op, _best_time(fns[op], repeats)))
        protos.clear_cache()
        attention.clear_cache()
    return rows


def linear_fit(x, y) -> tuple[float, float, float]:
    """Least-squares ``y = a x + b``; returns ``(a, b, r2)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    resid = y - (a * x + b)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), float(r2)


def summarize_pooling(rows: list[PoolingTiming]) -> dict:
    """Per-op linear fits over t and the SoM-TP overhead ratio at each t."""
    out: dict = {"fits": {}, "overhead": {}}
    for op in POOL_OPS:
        pts = [(r.t, r.seconds) for r in rows if r.op == op]
        ts, secs = zip(*pts)
        out["fits"][op] = linear_fit(ts, secs)
    by_t: dict[int, dict[str, float]] = {}
    for r in rows:
        by_t.setdefault(r.t, {})[r.op] = r.seconds
    for t, d in by_t.items():
        out["overhead"][t] = d["somtp"] / (d["gtp"] + d["stp"] + d["dtp"])
    return out


def write_pooling_csv(rows: list[PoolingTiming], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "op", "seconds"])
        for r in rows:
            w.writerow([r.t, r.op, repr(r.seconds)])


# ---------------------------------------------------------------------------
# kernels

@dataclass
class KernelTiming:
    kernel: str
    size: str
    backend: str
    seconds: float


def bench_kernels(sizes=((4, 128), (4, 512), (8, 1024)), batch: int = 8, repeats: int = 3,
                  seed: int = 0) -> list[KernelTiming]:
    """Time each DP kernel on both backends for ``(L, T)`` alignment sizes.

    The pooling kernel runs on ``(batch, 64, T)`` features with ``L`` segments.
    """
    compiled = kernels.compiled()
    backends = [("python", _fallback)] + ([("compiled", compiled)] if compiled is not None else [])
    rng = np.random.default_rng(seed)
    rows: list[KernelTiming] = []
    for L, T in sizes:
        D = np.ascontiguousarray(rng.uniform(0.0, 2.0, size=(batch, L, T)))
        H = np.ascontiguousarray(rng.normal(size=(batch, 64, T)))
        cuts = np.linspace(0, T, L + 1).astype(np.int64)
        bounds = np.ascontiguousarray(np.broadcast_to(cuts, (batch, L + 1)))
        R = compiled.softdtw_forward_batch(D, 1.0) if compiled is not None else _fallback.softdtw_forward_batch(D, 1.0)
        p = rng.normal(size=64 * T * 32)
        g = rng.normal(size=p.size)
        cases = {
            "softdtw_forward": lambda m: m.softdtw_forward_batch(D, 1.0),
            "softdtw_backward": lambda m: m.softdtw_backward_batch(D, R, 1.0),
            "backtrack": lambda m: m.backtrack_batch(R, L, T),
            "segment_pool_max": lambda m: m.segment_pool_batch(H, bounds, True),
            "adam_update": lambda m: m.adam_update(p.copy(), g, np.zeros_like(p), np.zeros_like(p),
                                                   1e-4, 0.9, 0.999, 1e-8, 0.1, 0.001),
        }
        for name, fn in cases.items():
            for label, mod in backends:
                rows.append(KernelTiming(name, f"{L}x{T}", label, _best_time(lambda: fn(mod), repeats)))
    return rows


def write_kernel_csv(rows: list[KernelTiming], path: str | os.PathLike) -> None:
    speed: dict[tuple[str, str], dict[str, float]] = {}
    for r in rows:
        speed.setdefault((r.kernel, r.size), {})[r.backend] = r.seconds
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["kernel", "size", "backend", "seconds", "speedup_vs_python"])
        for r in rows:
            base = speed[(r.kernel, r.size)]["python"]
            w.writerow([r.kernel, r.size, r.backend, repr(r.seconds), f"{base / r.seconds:.3g}"])
