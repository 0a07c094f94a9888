"""Command-line entry point: ``somtp <command> ...``.

Failures print one line ``error[<kind>]: <reason>`` to stderr and exit nonzero
(2 for usage and config errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import SYNTH_KINDS, DataError, Dataset, data_root, load_dataset, synth_dataset

log = logging.getLogger("somtp")

DEFAULT_LAMBDAS = tuple(float(v) for v in np.logspace(-5, 0, 11))
DEFAULT_T_VALUES = (256, 512, 1024, 2048, 4096)


class CLIError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message.replace("\n", " "), 2)


# ---------------------------------------------------------------------------
# helpers

def resolve_dataset(source: str) -> Dataset:
    """Load a dataset file or build ``synth:<kind>:<n>:<t>[:<seed>]``.

    Relative paths that do not exist are looked up under ``SOMTP_DATA_ROOT``.
    """
    if source.startswith("synth:"):
        parts = source.split(":")[1:]
        if len(parts) not in (3, 4) or parts[0] not in SYNTH_KINDS:
            raise CLIError("data", f"synthetic source must be synth:<{'|'.join(SYNTH_KINDS)}>:<n>:<t>[:<seed>], got {source!r}")
        try:
            n, t = int(parts[1]), int(parts[2])
            seed = int(parts[3]) if len(parts) == 4 else 0
        except ValueError:
            raise CLIError("data", f"synthetic size fields must be integers: {source!r}") from None
        return synth_dataset(parts[0], n, t, seed)
    path = Path(source)
    if not path.is_absolute() and not path.exists():
        path = data_root() / path
    return load_dataset(path)


def relabel(ds: Dataset, labels: tuple[str, ...]) -> Dataset:
    """Re-express ``ds`` class ids in the vocabulary ``labels`` (matched by label text)."""
    index = {lab: i for i, lab in enumerate(labels)}
    unknown = sorted(set(ds.labels) - set(index))
    if unknown:
        raise CLIError("data", f"labels {unknown} were not seen in training (known: {list(labels)})")
    mapping = np.array([index[lab] for lab in ds.labels], dtype=np.int64)
    return Dataset(ds.X, mapping[ds.y], labels, ds.name, dict(ds.meta))


def _overrides(pairs: list[str] | None) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise CLIError("config", f"--set expects key=value, got {pair!r}", 2)
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _floats(text: str, what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CLIError("usage", f"{what} must be a comma-separated list of numbers, got {text!r}", 2) from None
    if not vals:
        raise CLIError("usage", f"{what} is empty", 2)
    return vals


def _prepare_eval(ckpt, ds: Dataset) -> Dataset:
    ds = relabel(ds, ckpt.labels)
    if ds.d != ckpt.model_cfg.d or ds.t != ckpt.model_cfg.t:
        raise CLIError("data", f"dataset shape (d={ds.d}, t={ds.t}) does not match the checkpoint "
                               f"(d={ckpt.model_cfg.d}, t={ckpt.model_cfg.t})")
    return ckpt.norm.apply(ds) if ckpt.norm is not None else ds


def _eval_batch(ckpt) -> int:
    return ckpt.run.batch_size or 8


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    from .trainer import save_run, train

    run = load_config(args.config, _overrides(args.set))
    train_ds = resolve_dataset(args.train_file)
    val_ds = resolve_dataset(args.val_file) if args.val_file else None
    if val_ds is not None:
        val_ds = relabel(val_ds, train_ds.labels)
    result = train(run, train_ds, val_ds)
    paths = save_run(result, args.out_dir)
    print(f"best epoch {result.best_epoch}  val_acc {result.best_val_acc:.4f}")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_eval(args) -> int:
    from .trainer import evaluate_model, write_selection_csv

    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    ds = _prepare_eval(ckpt, resolve_dataset(args.test_file))
    res = evaluate_model(model, ds, _eval_batch(ckpt))
    for key in ("acc", "f1_macro", "roc_auc", "pr_auc"):
        print(f"{key} {res.metrics[key]:.6f}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval_metrics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["acc", "f1_macro", "roc_auc", "pr_auc"])
            w.writerow([repr(res.metrics[k]) for k in ("acc", "f1_macro", "roc_auc", "pr_auc")])
        with open(out / "eval_probs.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "label", *(f"p_{lab}" for lab in ckpt.labels)])
            for i, (row, c) in enumerate(zip(res.probs, ds.y)):
                w.writerow([i, ckpt.labels[c], *(repr(float(v)) for v in row)])
        if ckpt.model_cfg.pooling == "somtp":
            write_selection_csv(res.records, out / "eval_selection.csv")
    if ckpt.model_cfg.pooling == "somtp":
        counts = res.selection_counts()
        print("selection " + " ".join(f"{b}={c}" for b, c in counts.items()))
    return 0


def _indices(text: str, N: int) -> list[int]:
    try:
        idx = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CLIError("usage", f"--indices must be comma-separated integers, got {text!r}", 2) from None
    for i in idx:
        if not 0 <= i < N:
            raise CLIError("index", f"sample index {i} out of range for {N} samples")
    return idx


def cmd_explain(args) -> int:
    from .lrp import explain

    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    ds = _prepare_eval(ckpt, resolve_dataset(args.test_file))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in _indices(args.indices, len(ds)):
        rmap = explain(model, ds.X[i], args.target)
        path = out / f"relevance_{i}.csv"
        rmap.to_csv(path, sample=i)
        print(f"{path}  target={rmap.target} selected={rmap.selected}")
    return 0


def cmd_sweep(args) -> int:
    from .trainer import evaluate_model, train

    base = load_config(args.config, _overrides(args.set))
    lambdas = _floats(args.lambdas, "--lambdas") if args.lambdas else list(DEFAULT_LAMBDAS)
    train_ds = resolve_dataset(args.train_file)
    test_ds = relabel(resolve_dataset(args.test_file), train_ds.labels) if args.test_file else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    failures = 0
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "val_acc", "test_acc", "error"])
        for lam in lambdas:
            try:
                run = RunConfig.from_dict({**base.to_dict(), "lam": lam})
                res = train(run, train_ds)
                test_acc = math.nan
                if test_ds is not None:
                    t = res.norm.apply(test_ds) if res.norm is not None else test_ds
                    test_acc = evaluate_model(res.model, t, run.batch_for(len(train_ds))).metrics["acc"]
                w.writerow([repr(lam), repr(res.best_val_acc), repr(test_acc), ""])
                print(f"lambda {lam:.3g}  val_acc {res.best_val_acc:.4f}  test_acc {test_acc:.4f}")
            except (ValueError, FloatingPointError) as exc:
                failures += 1
                reason = " ".join(str(exc).split())
                w.writerow([repr(lam), "nan", "nan", reason])
                print(f"lambda {lam:.3g}  failed: {reason}", file=sys.stderr)
            fh.flush()
    print(f"summary: {out}")
    return 1 if failures == len(lambdas) else 0


def cmd_bench_pooling(args) -> int:
    from .bench import bench_pooling, summarize_pooling, write_pooling_csv

    t_values = [int(v) for v in _floats(args.t_values, "--t-values")] if args.t_values else list(DEFAULT_T_VALUES)
    rows = bench_pooling(t_values, k=args.k, n=args.n, batch=args.batch, repeats=args.repeats)
    write_pooling_csv(rows, args.out)
    summary = summarize_pooling(rows)
    for op, (a, b, r2) in summary["fits"].items():
        print(f"{op:6s} slope {a:.3e} s/step  intercept {b:.3e} s  R2 {r2:.4f}")
    worst = max(summary["overhead"].values())
    print(f"somtp / (gtp + stp + dtp) <= {worst:.3f}")
    print(f"timings: {args.out}")
    return 0


def cmd_bench_kernels(args) -> int:
    from .bench import bench_kernels, write_kernel_csv
    from .kernels import compiled

    if compiled() is None:
        print("compiled extension not built; timing the Python backend only", file=sys.stderr)
    rows = bench_kernels(repeats=args.repeats)
    write_kernel_csv(rows, args.out)
    with open(args.out, encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="somtp", description="Selection over multiple temporal poolings for time series classification.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write metrics, selection log and best checkpoint")
    t.add_argument("--config", help="JSON file of RunConfig keys (defaults when omitted)")
    t.add_argument("--train-file", required=True, help="UCR .tsv, sktime .ts, or synth:<kind>:<n>:<t>[:<seed>]")
    t.add_argument("--val-file", help="validation set; default is a stratified split of the training set")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labelled test set")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--test-file", required=True)
    e.add_argument("--out-dir", help="write eval_metrics.csv, eval_probs.csv and eval_selection.csv here")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="write LRP relevance CSVs for selected samples")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--test-file", required=True)
    x.add_argument("--indices", required=True, help="comma-separated sample indices")
    x.add_argument("--target", type=int, help="class to explain (default: predicted class)")
    x.add_argument("--out-dir", required=True)
    x.set_defaults(func=cmd_explain)

    s = sub.add_parser("sweep", help="train once per lambda and summarise accuracies")
    s.add_argument("--config")
    s.add_argument("--train-file", required=True)
    s.add_argument("--test-file")
    s.add_argument("--lambdas", help="comma-separated values (default: 11 log-spaced in [1e-5, 1])")
    s.add_argument("--out", required=True, help="summary CSV path")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bench-pooling", help="time each pooling forward against series length")
    b.add_argument("--t-values", help="comma-separated lengths (default 256,512,1024,2048,4096)")
    b.add_argument("--k", type=int, default=256)
    b.add_argument("--n", type=int, default=4)
    b.add_argument("--batch", type=int, default=8)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench_pooling)

    k = sub.add_parser("bench-kernels", help="compare compiled and pure-Python kernels")
    k.add_argument("--repeats", type=int, default=3)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_bench_kernels)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        return args.func(args)
    except CLIError as exc:
        kind, msg, code = exc.kind, str(exc), exc.code
    except ConfigError as exc:
        kind, msg, code = "config", str(exc), 2
    except DataError as exc:
        kind, msg, code = "data", str(exc), 1
    except CheckpointError as exc:
        kind, msg, code = "checkpoint", str(exc), 1
    except FloatingPointError as exc:
        kind, msg, code = "numeric", str(exc), 1
    except OSError as exc:
        kind, msg, code = "io", f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc), 1
    except ValueError as exc:
        kind, msg, code = "value", str(exc), 1
    print(f"error[{kind}]: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
