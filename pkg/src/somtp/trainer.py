"""Training loop, evaluation and the CSV logs written by the CLI."""
from __future__ import annotations

import csv
import logging
import os
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import Dataset, ZNorm, class_weights, split_train_val
from .metrics import evaluate
from .model import BLOCKS, SelectionRecord, SoMTPModel, make_optimizers, train_step

log = logging.getLogger("somtp")

METRIC_FIELDS = ["epoch", "loss_cls", "loss_perspective", "loss_attn", "loss_proto", "loss_cost",
                 "train_acc", "val_acc", "val_f1", "sel_gtp", "sel_stp", "sel_dtp"]
SELECTION_FIELDS = ["epoch", "batch", "score_gtp", "score_stp", "score_dtp", "selected"]


@dataclass
class EvalResult:
    probs: np.ndarray
    records: list[SelectionRecord]
    metrics: dict[str, float]

    @property
    def preds(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    def selection_counts(self) -> dict[str, int]:
        c = Counter(r.selected for r in self.records)
        return {b: c.get(b, 0) for b in BLOCKS}


@dataclass
class TrainResult:
    model: SoMTPModel
    run: RunConfig
    labels: tuple[str, ...]
    norm: ZNorm | None
    history: list[dict] = field(default_factory=list)
    selection_log: list[SelectionRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = float("-inf")
    rng: np.random.Generator | None = None
    final_state: dict[str, np.ndarray] | None = None

    def final_model(self) -> SoMTPModel:
        """The model as it stood after the last epoch run (not the kept best state)."""
        model = SoMTPModel(self.model.cfg)
        model.load_state_dict(self.final_state)
        return model.eval()


def evaluate_model(model: SoMTPModel, ds: Dataset, batch_size: int) -> EvalResult:
    """Eval-mode pass in fixed order; SoM-TP selects one block per batch."""
    if ds.d != model.cfg.d or ds.t != model.cfg.t:
        raise ValueError(f"dataset shape (d={ds.d}, t={ds.t}) does not match the model "
                         f"(d={model.cfg.d}, t={model.cfg.t})")
    model.eval()
    probs, records = [], []
    for bi, start in enumerate(range(0, len(ds), batch_size)):
        out = model.forward(ds.X[start:start + batch_size], batch=bi)
        probs.append(out.probs_cls)
        if out.record is not None:
            records.append(out.record)
    model.clear_cache()
    P = np.concatenate(probs, axis=0)
    return EvalResult(P, records, evaluate(P, ds.y))


def _snapshot(model: SoMTPModel) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


def train(run: RunConfig, train_ds: Dataset, val_ds: Dataset | None = None) -> TrainResult:
    """Fit a model; the returned one holds the best-validation state rounded to float32.

    Without ``val_ds`` a stratified validation split is carved from ``train_ds``.
    Stops early once validation accuracy reaches ``run.target_val_acc``.
    """
    if val_ds is None:
        train_ds, val_ds = split_train_val(train_ds, run.val_fraction, run.seed)
    if len(val_ds) == 0:
        raise ValueError("validation split is empty; provide more samples or a validation file")
    if val_ds.labels != train_ds.labels:
        raise ValueError("train and validation label vocabularies differ")
    norm = None
    if run.normalize:
        norm = ZNorm.fit(train_ds)
        train_ds, val_ds = norm.apply(train_ds), norm.apply(val_ds)
    weights = class_weights(train_ds)
    batch = run.batch_for(len(train_ds))
    model = SoMTPModel(run.model_config(train_ds.d, train_ds.C, train_ds.t))
    opt = make_optimizers(model, run.lr)
    rng = np.random.default_rng(run.seed)
    result = TrainResult(model, run, train_ds.labels, norm, rng=rng)
    best_state = None
    for epoch in range(run.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_ds))
        sums = Counter()
        n_batches = 0
        for bi, start in enumerate(range(0, len(order), batch)):
            idx = order[start:start + batch]
            losses, record = train_step(model, opt, train_ds.X[idx], train_ds.y[idx], run.lam, weights,
                                        epoch=epoch, batch=bi)
            for key in ("cls", "perspective", "attn", "proto", "cost"):
                sums[key] += getattr(losses, key)
            if record is not None:
                result.selection_log.append(record)
            n_batches += 1
        train_eval = evaluate_model(model, train_ds, batch)
        val_eval = evaluate_model(model, val_ds, batch)
        sel = Counter(r.selected for r in result.selection_log if r.epoch == epoch)
        row = {
            "epoch": epoch,
            **{f"loss_{k}": sums[k] / n_batches for k in ("cls", "perspective", "attn", "proto", "cost")},
            "train_acc": train_eval.metrics["acc"],
            "val_acc": val_eval.metrics["acc"],
            "val_f1": val_eval.metrics["f1_macro"],
            **{f"sel_{b}": sel.get(b, 0) for b in BLOCKS},
        }
        result.history.append(row)
        log.info("epoch %d  loss %.4f  train_acc %.4f  val_acc %.4f  (%.1fs)", epoch, row["loss_cost"],
                 row["train_acc"], row["val_acc"], time.perf_counter() - t0)
        # strict improvement keeps the earliest epoch on ties
        if row["val_acc"] > result.best_val_acc:
            result.best_val_acc, result.best_epoch = row["val_acc"], epoch
            best_state = _snapshot(model)
        if run.target_val_acc is not None and row["val_acc"] >= run.target_val_acc:
            log.info("validation accuracy target %.3f reached at epoch %d", run.target_val_acc, epoch)
            break
    result.final_state = _snapshot(model)
    model.load_state_dict(best_state)
    model.quantize_()
    model.eval()
    return result


# ---------------------------------------------------------------------------
# files

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics_csv(history: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for row in history:
            w.writerow([_fmt(row[k]) for k in METRIC_FIELDS])


def write_selection_csv(records: list[SelectionRecord], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SELECTION_FIELDS)
        for r in records:
            w.writerow(r.csv_row())


def save_run(result: TrainResult, out_dir: str | os.PathLike) -> dict[str, Path]:
    """Write ``metrics.csv``, ``selection.csv`` (SoM-TP only) and ``best.ckpt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.csv", "checkpoint": out / "best.ckpt"}
    write_metrics_csv(result.history, paths["metrics"])
    if result.run.pooling == "somtp":
        paths["selection"] = out / "selection.csv"
        write_selection_csv(result.selection_log, paths["selection"])
    save_checkpoint(paths["checkpoint"], result.model, result.run, result.labels, result.norm, result.rng,
                    {"best_epoch": result.best_epoch, "best_val_acc": result.best_val_acc})
    return paths
