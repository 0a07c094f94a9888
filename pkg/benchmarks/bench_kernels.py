"""Compiled versus pure-Python kernel timings.

    python benchmarks/bench_kernels.py [--repeats 5] [--out kernels.csv]

Also times one full SoM-TP training step under each backend, which is the
number that decides epoch wall time.
"""
import argparse
import sys
import time

import numpy as np

from somtp import _fallback, kernels
from somtp.bench import bench_kernels, write_kernel_csv
from somtp.model import ModelConfig, SoMTPModel, make_optimizers, train_step


def step_time(backend: str, repeats: int) -> float:
    previous = kernels.impl
    kernels.impl = kernels.compiled() if backend == "compiled" else _fallback
    try:
        rng = np.random.default_rng(0)
        model = SoMTPModel(ModelConfig(d=1, C=2, t=128, n=2))
        opt = make_optimizers(model)
        x, y = rng.normal(size=(8, 1, 128)), np.arange(8) % 2
        train_step(model, opt, x, y, 0.1)  # warm-up
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            train_step(model, opt, x, y, 0.1)
            best = min(best, time.perf_counter() - t0)
        return best
    finally:
        kernels.impl = previous


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default="kernels.csv")
    args = p.parse_args()
    if kernels.compiled() is None:
        print("compiled extension is not built; nothing to compare", file=sys.stderr)
        return 1
    rows = bench_kernels(repeats=args.repeats)
    write_kernel_csv(rows, args.out)
    with open(args.out) as fh:
        sys.stdout.write(fh.read())
    py, cc = step_time("python", args.repeats), step_time("compiled", args.repeats)
    print(f"\ntrain step (FCN, B=8, t=128, n=2): python {py:.3f}s  compiled {cc:.3f}s  speedup {py / cc:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
