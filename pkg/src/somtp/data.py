"""Dataset loading (UCR tsv, sktime ``.ts``), splitting, weighting, and
synthetic fixtures with known decision rules."""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class Dataset:
    """Equal-length labelled series: ``X (N, d, t)``, integer labels ``y (N,)``.

    ``labels[i]`` is the original label text mapped to class id ``i``.
    """

    X: np.ndarray
    y: np.ndarray
    labels: tuple[str, ...]
    name: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 3:
            raise DataError(f"X must be (N, d, t), got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DataError(f"y must have one label per sample, got {y.shape} for {X.shape[0]} samples")
        if y.size and (y.min() < 0 or y.max() >= len(self.labels)):
            raise DataError("label ids must lie in [0, C)")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "labels", tuple(str(v) for v in self.labels))

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def t(self) -> int:
        return self.X.shape[2]

    @property
    def C(self) -> int:
        return len(self.labels)

    @property
    def samples(self) -> list[tuple[np.ndarray, int]]:
        return [(self.X[i], int(self.y[i])) for i in range(len(self))]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.labels, self.name, dict(self.meta))

    def counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.C)


def _label_order(raw: list[str]) -> list[str]:
    """Distinct labels sorted numerically when all parse as numbers, else as text."""
    distinct = list(dict.fromkeys(raw))
    try:
        return sorted(distinct, key=float)
    except ValueError:
        return sorted(distinct)


def _encode(raw: list[str]) -> tuple[np.ndarray, tuple[str, ...]]:
    vocab = _label_order(raw)
    index = {lab: i for i, lab in enumerate(vocab)}
    return np.array([index[r] for r in raw], dtype=np.int64), tuple(vocab)


def _float(tok: str, where: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise DataError(f"{where}: non-numeric value {tok!r}") from None


# ---------------------------------------------------------------------------
# UCR tab-separated

def parse_ucr_tsv(path: str | os.PathLike) -> Dataset:
    """One series per line: label, then ``t`` values (tab or whitespace separated)."""
    path = Path(path)
    rows, raw = [], []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            toks = line.split()
            if not toks:
                continue
            where = f"{path.name}:{lineno}"
            if len(toks) < 2:
                raise DataError(f"{where}: expected a label followed by at least one value")
            values = [_float(tok, where) for tok in toks[1:]]
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DataError(f"{where}: row has {len(values)} values, expected {width} (unequal lengths are not supported)")
            raw.append(toks[0])
            rows.append(values)
    if not rows:
        raise DataError(f"{path.name}: no samples")
    y, labels = _encode(raw)
    return Dataset(np.array(rows)[:, None, :], y, labels, path.stem)


def write_ucr_tsv(ds: Dataset, path: str | os.PathLike) -> None:
    if ds.d != 1:
        raise DataError("the UCR tsv format holds univariate series only")
    with open(path, "w", encoding="utf-8") as fh:
        for x, c in zip(ds.X[:, 0], ds.y):
            fh.write("\t".join([ds.labels[c], *(repr(float(v)) for v in x)]) + "\n")


# ---------------------------------------------------------------------------
# sktime .ts

def parse_sktime_ts(path: str | os.PathLike) -> Dataset:
    """Header lines starting with ``@``, then ``dim1:dim2:...:label`` rows."""
    path = Path(path)
    header: dict[str, str] = {}
    rows, raw = [], []
    in_data = False
    dims = length = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            where = f"{path.name}:{lineno}"
            if not line or line.startswith("#"):
                continue
            if not in_data:
                if not line.startswith("@"):
                    raise DataError(f"{where}: data row before @data")
                key, _, value = line[1:].partition(" ")
                key = key.lower()
                if key == "data":
                    in_data = True
                    if header.get("classlabel", "").split()[:1] == ["false"]:
                        raise DataError(f"{path.name}: @classLabel false; classification needs labels")
                else:
                    header[key] = value.strip()
                continue
            parts = line.split(":")
            if len(parts) < 2:
                raise DataError(f"{where}: expected dimensions followed by a label")
            series = [[_float(v, where) for v in p.split(",")] for p in parts[:-1]]
            if dims is None:
                dims, length = len(series), len(series[0])
            if len(series) != dims:
                raise DataError(f"{where}: {len(series)} dimensions, expected {dims}")
            if any(len(s) != length for s in series):
                raise DataError(f"{where}: unequal series lengths (expected {length}); unequal lengths are not supported")
            rows.append(series)
            raw.append(parts[-1].strip())
    if not in_data:
        raise DataError(f"{path.name}: missing @data section")
    if not rows:
        raise DataError(f"{path.name}: no samples")
    y, labels = _encode(raw)
    name = header.get("problemname", path.stem)
    return Dataset(np.array(rows), y, labels, name, {"header": header})


def write_sktime_ts(ds: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"@problemName {ds.name or 'series'}\n")
        fh.write("@timeStamps false\n")
        fh.write(f"@univariate {'true' if ds.d == 1 else 'false'}\n")
        fh.write(f"@equalLength true\n@seriesLength {ds.t}\n")
        fh.write(f"@classLabel true {' '.join(ds.labels)}\n@data\n")
        for x, c in zip(ds.X, ds.y):
            dims = [",".join(repr(float(v)) for v in row) for row in x]
            fh.write(":".join([*dims, ds.labels[c]]) + "\n")


def load_dataset(path: str | os.PathLike) -> Dataset:
    """Dispatch on extension: ``.ts`` is sktime, anything else is UCR tsv."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    return parse_sktime_ts(path) if path.suffix.lower() == ".ts" else parse_ucr_tsv(path)


# ---------------------------------------------------------------------------
# splitting, weighting, normalisation

def split_train_val(ds: Dataset, fraction: float = 0.2, seed: int = 10) -> tuple[Dataset, Dataset]:
    """Stratified split; each class contributes ``round(fraction * count)`` (at least 1) to val.

    Classes with fewer than two samples stay entirely in train.
    """
    if len(ds) == 0:
        raise DataError("cannot split an empty dataset")
    if not 0.0 < fraction < 1.0:
        raise DataError(f"validation fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in range(ds.C):
        idx = np.flatnonzero(ds.y == c)
        if idx.size == 0:
            continue
        if idx.size < 2:
            warnings.warn(f"class {ds.labels[c]!r} has a single sample; kept in train", stacklevel=2)
            train_idx.extend(idx)
            continue
        idx = rng.permutation(idx)
        n_val = min(max(1, int(round(fraction * idx.size))), idx.size - 1)
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(val_idx))


def class_weights(train: Dataset | np.ndarray, C: int | None = None) -> np.ndarray:
    """Inverse-frequency weights normalised to mean 1 over the classes present."""
    y = train.y if isinstance(train, Dataset) else np.asarray(train, dtype=np.int64)
    C = train.C if isinstance(train, Dataset) else (C if C is not None else int(y.max()) + 1)
    if y.size == 0:
        raise DataError("cannot weight an empty training set")
    counts = np.bincount(y, minlength=C).astype(np.float64)
    present = counts > 0
    if present.sum() == 1:
        warnings.warn("training set holds a single class", stacklevel=2)
    w = np.zeros(C)
    w[present] = 1.0 / counts[present]
    w[present] /= w[present].mean()
    # absent classes never index the loss; give them a neutral weight
    w[~present] = 1.0
    return w


@dataclass(frozen=True)
class ZNorm:
    mean: np.ndarray  # (d,)
    std: np.ndarray  # (d,)

    @classmethod
    def fit(cls, train: Dataset) -> "ZNorm":
        mean = train.X.mean(axis=(0, 2))
        std = train.X.std(axis=(0, 2))
        return cls(mean, np.where(std > 0, std, 1.0))

    def apply(self, ds: Dataset) -> Dataset:
        X = (ds.X - self.mean[None, :, None]) / self.std[None, :, None]
        return Dataset(X, ds.y, ds.labels, ds.name, dict(ds.meta))


# ---------------------------------------------------------------------------
# synthetic fixtures

SYNTH_KINDS = ("spike", "periodic", "mixed")
NOISE = 0.1
SPIKE_HEIGHTS = (1.5, 3.0)
PERIODIC_CYCLES = (2, 6)
MIXED_SPIKE, MIXED_BUMP, MIXED_BUMPS = 3.0, 1.2, 3


def _bump(t: int, centre: float, width: float) -> np.ndarray:
    grid = np.arange(t)
    return np.exp(-0.5 * ((grid - centre) / width) ** 2)


def synth_dataset(kind: str, n_samples: int, t: int, seed: int = 0) -> Dataset:
    """Balanced two-class univariate fixtures.

    spike
        One narrow peak at a random position; class 0 has height 1.5, class 1
        height 3.0.  Rule: ``max(x) > 2.25``.
    periodic
        A sinusoid with random phase; class 0 completes 2 cycles, class 1
        completes 6.  Rule: dominant FFT bin.
    mixed
        Class 0 carries one tall spike (height 3, a global cue); class 1 carries
        three moderate bumps (height 1.2 each) spread across the series, a local
        cue.  Rule: ``max(x) > 2.2``.

    All kinds add N(0, 0.1^2) noise.
    """
    if kind not in SYNTH_KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    if t < 16:
        raise DataError(f"synthetic series need t >= 16, got {t}")
    if n_samples < 2:
        raise DataError("need at least two samples")
    rng = np.random.default_rng(seed)
    y = rng.permutation(np.arange(n_samples) % 2)
    X = rng.normal(0.0, NOISE, size=(n_samples, 1, t))
    grid = np.arange(t)
    for i, c in enumerate(y):
        if kind == "spike":
            X[i, 0] += SPIKE_HEIGHTS[c] * _bump(t, rng.uniform(4, t - 4), 1.0)
        elif kind == "periodic":
            phase = rng.uniform(0, 2 * np.pi)
            X[i, 0] += np.sin(2 * np.pi * PERIODIC_CYCLES[c] * grid / t + phase)
        elif c == 0:
            X[i, 0] += MIXED_SPIKE * _bump(t, rng.uniform(4, t - 4), 1.0)
        else:
            # one bump per third of the series, jittered inside its third
            third = t / MIXED_BUMPS
            for j in range(MIXED_BUMPS):
                centre = rng.uniform(j * third + 0.2 * third, (j + 1) * third - 0.2 * third)
                X[i, 0] += MIXED_BUMP * _bump(t, centre, 1.5)
    return Dataset(X, y, ("0", "1"), kind, {"seed": seed})


def rule_classify(kind: str, X: np.ndarray) -> np.ndarray:
    """Hand-written classifier matching each synthetic generator's construction."""
    X = np.asarray(X, dtype=np.float64)
    x = X[:, 0]
    if kind == "spike":
        return (x.max(axis=1) > sum(SPIKE_HEIGHTS) / 2).astype(np.int64)
    if kind == "periodic":
        spec = np.abs(np.fft.rfft(x - x.mean(axis=1, keepdims=True), axis=1))
        return (np.argmax(spec, axis=1) > sum(PERIODIC_CYCLES) / 2).astype(np.int64)
    if kind == "mixed":
        return (x.max(axis=1) <= 2.2).astype(np.int64)
    raise DataError(f"unknown synthetic kind {kind!r}")


def data_root() -> Path:
    """Root for dataset lookups: ``SOMTP_DATA_ROOT`` or the current directory."""
    return Path(os.environ.get("SOMTP_DATA_ROOT", "."))
