"""Layer-wise relevance propagation through a trained model.

Relevance starts as 1 on the target logit of the CLS head, crosses the dense
layers with the epsilon rule, follows the selected pooling block back onto the
time axis, and crosses the convolutional stack with the z+ rule (eval-mode
batchnorm folded into the preceding conv).  ReLUs pass relevance unchanged.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import pooling
from .backbone import ResidualBlock
from .model import BLOCKS, SoMTPModel, build_pbar, select_blocks
from .numcore import BatchNorm1d, Conv1d, Linear, ReLU, Sequential, as_tensor, conv1d

EPS_LRP = 1e-6


# ---------------------------------------------------------------------------
# rules

def lrp_fc_epsilon(layer: Linear, R_out: np.ndarray, a: np.ndarray, eps: float = EPS_LRP) -> np.ndarray:
    """Epsilon rule: ``R_j = sum_i a_j w_ij / (z_i + eps * sign(z_i)) R_i``.

    ``z`` includes the bias, so part of the relevance is absorbed by it.
    """
    W, b = layer.params["weight"], layer.params["bias"]
    a = as_tensor(a)
    z = W @ a + b
    stab = z + eps * np.where(z >= 0, 1.0, -1.0)
    return a * (W.T @ (as_tensor(R_out) / stab))


def _transpose_corr(s: np.ndarray, weight: np.ndarray) -> np.ndarray:
    # adjoint of same-padded correlation: sum_{o,j} w[o,c,j] s[o, i - j + pad]
    return conv1d(s, weight[:, :, ::-1].transpose(1, 0, 2))


def lrp_conv_zplus(weight: np.ndarray, R_out: np.ndarray, a: np.ndarray) -> np.ndarray:
    """z+ rule for a same-padded conv with weights ``(k_out, k_in, w)`` on input ``a (k_in, t)``.

    Outputs whose positive pre-activation is exactly zero spread their
    relevance uniformly over the in-bounds cells of their receptive field.
    """
    weight = as_tensor(weight)
    a = as_tensor(a)
    R_out = as_tensor(R_out)
    w_pos = np.maximum(weight, 0.0)
    z = conv1d(a, w_pos)
    dead = z <= 0.0
    s = np.where(dead, 0.0, R_out / np.where(dead, 1.0, z))
    R_in = a * _transpose_corr(s, w_pos)
    if dead.any():
        k_out, k_in, width = weight.shape
        ones_in = np.ones((1, a.shape[1]))
        cells = k_in * conv1d(ones_in, np.ones((1, 1, width)))[0]  # in-bounds cells per window
        u = np.where(dead, R_out, 0.0) / cells[None, :]
        R_in = R_in + _transpose_corr(u, np.ones((k_out, k_in, width)))
    return R_in


def lrp_pool(trace: pooling.PoolTrace, R_out: np.ndarray) -> np.ndarray:
    """MAX sends relevance to the recorded argmax; AVG splits it evenly over the segment."""
    return pooling.pool_backward(R_out, trace)


def fold_conv_bn(conv: Conv1d, bn: BatchNorm1d | None) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode ``bn(conv(x))`` as a single conv ``(weight, bias)``."""
    W = conv.params["weight"]
    b = conv.params["bias"] if "bias" in conv.params else np.zeros(conv.k_out)
    if bn is None:
        return W.copy(), b.copy()
    scale, shift = bn.folded()
    return W * scale[:, None, None], b * scale + shift


# ---------------------------------------------------------------------------
# folded encoder programme

@dataclass
class _Stage:
    name: str
    weight: np.ndarray
    bias: np.ndarray
    relu: bool


def _stages(seq: Sequential, prefix: str) -> list[_Stage]:
    out: list[_Stage] = []
    layers = seq.layers
    i = 0
    while i < len(layers):
        conv = layers[i]
        if not isinstance(conv, Conv1d):
            raise TypeError(f"unsupported layer {type(conv).__name__} at {prefix}.{i}")
        bn = layers[i + 1] if i + 1 < len(layers) and isinstance(layers[i + 1], BatchNorm1d) else None
        j = i + 1 + (bn is not None)
        relu = j < len(layers) and isinstance(layers[j], ReLU)
        W, b = fold_conv_bn(conv, bn)
        out.append(_Stage(f"{prefix}.{i}", W, b, relu))
        i = j + relu
    return out


def _run(stage: _Stage, a: np.ndarray) -> np.ndarray:
    z = conv1d(a, stage.weight, stage.bias)
    return np.maximum(z, 0.0) if stage.relu else z


@dataclass
class LayerRelevance:
    name: str
    rule: str
    total_out: float
    total_in: float

    @property
    def leak(self) -> float:
        return self.total_out - self.total_in


@dataclass
class _Tape:
    layers: list[LayerRelevance] = field(default_factory=list)
    maps: dict[str, np.ndarray] = field(default_factory=dict)

    def zplus(self, stage: _Stage, R_out: np.ndarray, a: np.ndarray) -> np.ndarray:
        R_in = lrp_conv_zplus(stage.weight, R_out, a)
        self.layers.append(LayerRelevance(stage.name, "z+", float(R_out.sum()), float(R_in.sum())))
        self.maps[stage.name] = R_in
        return R_in


def _clip_input(a: np.ndarray, first: bool) -> np.ndarray:
    # raw input may be negative; z+ uses its positive part there
    return np.maximum(a, 0.0) if first else a


def _encoder_relevance(encoder: Sequential, x: np.ndarray, R_H: np.ndarray, tape: _Tape) -> np.ndarray:
    """Folded forward to record activations, then z+ back to the input."""
    blocks = encoder.layers
    if any(isinstance(b, ResidualBlock) for b in blocks):
        acts = [x]
        saved = []
        for bi, block in enumerate(blocks):
            a = acts[-1]
            branch = _stages(block.branch, f"encoder.{bi}.branch")
            short = _stages(block.shortcut, f"encoder.{bi}.shortcut") if block.shortcut is not None else None
            a_first = _clip_input(a, bi == 0)
            ins, h = [], a_first
            for st in branch:
                ins.append(h)
                h = _run(st, h)
            u = h
            v = _run(short[0], a_first) if short else a
            saved.append((branch, short, ins, a_first, u, v))
            acts.append(np.maximum(u + v, 0.0))
        R = R_H
        for bi in range(len(blocks) - 1, -1, -1):
            branch, short, ins, a_first, u, v = saved[bi]
            up, vp = np.maximum(u, 0.0), np.maximum(v, 0.0)
            tot = up + vp
            share = np.where(tot > 0, up / np.where(tot > 0, tot, 1.0), 0.5)
            R_u, R_v = R * share, R * (1.0 - share)
            tape.layers.append(LayerRelevance(f"encoder.{bi}.split", "residual", float(R.sum()), float(R_u.sum() + R_v.sum())))
            for st, a_in in zip(reversed(branch), reversed(ins)):
                R_u = tape.zplus(st, R_u, a_in)
            R_v = tape.zplus(short[0], R_v, a_first) if short else R_v
            R = R_u + R_v
        return R
    stages = _stages(encoder, "encoder")
    ins, h = [], x
    for si, st in enumerate(stages):
        h = _clip_input(h, si == 0)
        ins.append(h)
        h = _run(st, h)
    R = R_H
    for st, a_in in zip(reversed(stages), reversed(ins)):
        R = tape.zplus(st, R, a_in)
    return R


# ---------------------------------------------------------------------------
# explanation

@dataclass
class RelevanceMap:
    """Input relevance ``R_in (d, t)`` normalised to sum 1, plus diagnostics."""

    R_in: np.ndarray
    x: np.ndarray
    target: int
    selected: str
    pre_norm_sum: float
    layers: list[LayerRelevance]
    intermediate: dict[str, np.ndarray]

    def to_csv(self, path: str | os.PathLike, sample: int | None = None) -> None:
        write_relevance_csv(self, path, sample)


def head_relevance(head: Sequential, inp: np.ndarray, target: int, tape: _Tape, prefix: str,
                   eps: float = EPS_LRP) -> np.ndarray:
    """Epsilon rule from one-hot logit relevance back to the head input."""
    acts = []
    h = inp
    for layer in head.layers:
        acts.append(h)
        h = layer.forward(h[None])[0]
    R = np.zeros_like(h)
    R[target] = 1.0
    for i in range(len(head.layers) - 1, -1, -1):
        layer = head.layers[i]
        if isinstance(layer, Linear):
            R_in = lrp_fc_epsilon(layer, R, acts[i], eps)
            tape.layers.append(LayerRelevance(f"{prefix}.{i}", "epsilon", float(R.sum()), float(R_in.sum())))
            R = R_in
    return R


def route_bundle(R_pbar: np.ndarray, traces: dict[str, pooling.PoolTrace], n: int) -> np.ndarray:
    """Send bundle relevance ``(k, 3n)`` back to the feature map through all three traces."""
    R_g = R_pbar[:, :n].sum(axis=1, keepdims=True)
    return (lrp_pool(traces["gtp"], R_g[None])[0]
            + lrp_pool(traces["stp"], R_pbar[None, :, n:2 * n])[0]
            + lrp_pool(traces["dtp"], R_pbar[None, :, 2 * n:])[0])


def explain(model: SoMTPModel, x: np.ndarray, target: int | None = None, eps: float = EPS_LRP) -> RelevanceMap:
    """Relevance of each input cell for ``target`` (default: the predicted class)."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[0] != model.cfg.d:
        raise ValueError(f"expected a single ({model.cfg.d}, t) sample, got shape {x.shape}")
    was_training = model.training
    model.eval()
    try:
        cfg = model.cfg
        H = model.encoder.forward(x[None])
        pooled, _ = model.pool(H)
        k = model.k
        if cfg.pooling == "somtp":
            n = cfg.n
            pbar = build_pbar(pooled["gtp"][0], pooled["stp"][0], pooled["dtp"][0])
            A = model.attention.forward(pbar)
            block = int(select_blocks(A, n, cfg.selection_op, cfg.per_sample_selection)[0])
            selected = BLOCKS[block]
            p = pbar[0, :, block * n:(block + 1) * n]
        else:
            selected = cfg.pooling
            p = pooled[selected][0][0]
        logits = model.cls_head.forward(p.reshape(1, -1))[0]
        target = int(np.argmax(logits)) if target is None else int(target)
        if not 0 <= target < cfg.C:
            raise ValueError(f"target class {target} outside [0, {cfg.C})")
        tape = _Tape()
        R_p = head_relevance(model.cls_head, p.reshape(-1), target, tape, "cls", eps).reshape(k, -1)
        tape.maps["pooled"] = R_p
        if cfg.pooling == "somtp":
            R_pbar = np.zeros((k, 3 * cfg.n))
            R_pbar[:, block * cfg.n:(block + 1) * cfg.n] = R_p
            R_H = route_bundle(R_pbar, {b: pooled[b][1] for b in BLOCKS}, cfg.n)
        else:
            trace = pooled[selected][1]
            R_H = lrp_pool(trace, R_p[None])[0]
        tape.layers.append(LayerRelevance("pooling", selected, float(R_p.sum()), float(R_H.sum())))
        tape.maps["features"] = R_H
        R_x = _encoder_relevance(model.encoder, x, R_H, tape)
        total = float(R_x.sum())
        if total == 0.0:
            raise FloatingPointError("relevance vanished before the input layer; cannot normalise")
        return RelevanceMap(R_x / total, x.copy(), target, selected, total, tape.layers, tape.maps)
    finally:
        model.clear_cache()
        model.train(was_training)


def write_relevance_csv(rmap: RelevanceMap, path: str | os.PathLike, sample: int | None = None) -> None:
    """``time_index,channel,input_value,relevance`` rows after a ``#`` line naming the selected block."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        tag = f"sample={sample} " if sample is not None else ""
        fh.write(f"# {tag}target={rmap.target} selected={rmap.selected} pre_norm_sum={rmap.pre_norm_sum!r}\n")
        w = csv.writer(fh)
        w.writerow(["time_index", "channel", "input_value", "relevance"])
        d, t = rmap.R_in.shape
        for i in range(t):
            for c in range(d):
                w.writerow([i, c, repr(float(rmap.x[c, i])), repr(float(rmap.R_in[c, i]))])
