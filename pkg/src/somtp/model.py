"""SoM-TP: attention-driven selection over global, static and dynamic pooling.

Pipeline for a batch ``x (B, d, t)``::

    H = encoder(x)                                  (B, k, t)
    p_g, p_s, p_d = gtp(H), stp(H, n), dtp(H, seg)  (B, k, 1), (B, k, n), (B, k, n)
    Pbar = [p_g repeated n times | p_s | p_d]       (B, k, 3n)
    A = phi0(A0 * Pbar)                             (B, 3n)
    p = selected block of Pbar                      (B, k, n) -> CLS head
    Ens = A * Pbar                                  (B, k, 3n) -> DPLN head (training only)

Gradients are routed three ways per step: ``A0`` only from the attention
loss, prototypes only from the soft-DTW loss, everything else from
``L_CLS + lambda * L_perspective``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import pooling
from .backbone import build_encoder, build_head, HeadSpec
from .numcore import (Adam, Conv1d, Module, as_tensor, check_finite, cross_entropy,
                      log_softmax, softmax, softmax_backward)
from .softdtw import Prototypes

BLOCKS = ("gtp", "stp", "dtp")
POOLINGS = ("gtp", "stp", "dtp", "somtp")
PHI0_BIAS_INIT = 1.0
PROB_FLOOR = 1e-12
PARAM_GROUPS = ("encoder", "cls", "dpln", "phi0", "a0", "prototypes")


# ---------------------------------------------------------------------------
# bundle and selection

def build_pbar(p_g: np.ndarray, p_s: np.ndarray, p_d: np.ndarray) -> np.ndarray:
    """Concatenate ``[p_g x n | p_s | p_d]`` along the last axis.

    Accepts ``(k, 1), (k, n), (k, n)`` or the batched equivalents.
    """
    p_g, p_s, p_d = as_tensor(p_g), as_tensor(p_s), as_tensor(p_d)
    if p_g.shape[-1] != 1:
        raise ValueError("global pooling output must have a single column")
    if p_s.shape != p_d.shape or p_s.shape[:-1] != p_g.shape[:-1]:
        raise ValueError(f"inconsistent pooling shapes {p_g.shape}, {p_s.shape}, {p_d.shape}")
    n = p_s.shape[-1]
    return np.concatenate([np.repeat(p_g, n, axis=-1), p_s, p_d], axis=-1)


def block_means(A: np.ndarray, n: int) -> np.ndarray:
    """Per-block means ``(..., 3)`` of a score vector ``(..., 3n)``."""
    return A.reshape(*A.shape[:-1], 3, n).mean(axis=-1)


def select_blocks(A: np.ndarray, n: int, rule: str, per_sample: bool = False) -> np.ndarray:
    """Block index per sample from attention scores ``A (B, 3n)``.

    MAX: the block holding the largest softmax entry.  AVG: the block with the
    largest mean score.  Per-batch mode averages the per-sample quantities over
    the batch first and gives every sample the same block.  ``argmax`` returns
    the first maximum, so ties go to the lowest block (GTP < STP < DTP).
    """
    A = np.atleast_2d(A)
    if rule == "max":
        scores = softmax(A)
        if per_sample:
            return scores.argmax(axis=1) // n
        return np.full(A.shape[0], scores.mean(axis=0).argmax() // n)
    if rule == "avg":
        means = block_means(A, n)
        if per_sample:
            return means.argmax(axis=1)
        return np.full(A.shape[0], means.mean(axis=0).argmax())
    raise ValueError(f"selection rule must be 'max' or 'avg', got {rule!r}")


class Attention(Module):
    """DPL attention: a zero-initialised weight row ``A0`` and a conv ``phi0``.

    ``phi0`` runs along the ``3n`` axis with the ``k`` pooled channels as input
    channels and a single output channel (kernel 3, same padding).
    """

    def __init__(self, k: int, n: int, rng: np.random.Generator | None = None, kernel: int = 3):
        super().__init__()
        self.k, self.n = k, n
        self.add_param("A0", np.zeros((1, 3 * n)))
        self.phi0 = Conv1d(k, 1, kernel, rng)
        # Unit bias: with A0 = 0 the scores start as the constant 1, so the
        # ensemble is the plain bundle.  A zero bias would make A, the DPLN
        # input and every DPLN hidden unit exactly 0, a point no gradient leaves.
        self.phi0.params["bias"][...] = PHI0_BIAS_INIT
        self._cache = None

    def children(self) -> dict[str, Module]:
        return {"phi0": self.phi0}

    def forward(self, pbar: np.ndarray) -> np.ndarray:
        M = self.params["A0"][None] * pbar
        self._cache = pbar
        return self.phi0.forward(M)[:, 0, :]

    def backward(self, grad_A: np.ndarray, a0_grad: bool = True) -> np.ndarray:
        """Gradient w.r.t. ``Pbar`` through ``M``; accumulates ``phi0`` and optionally ``A0``."""
        pbar = self._cache
        gM = self.phi0.backward(grad_A[:, None, :])
        if a0_grad:
            self.grads["A0"] += (gM * pbar).sum(axis=(0, 1))[None]
        return self.params["A0"][None] * gM


def attention_block(pbar: np.ndarray, attention: Attention, rule: str = "max",
                    per_sample: bool = False):
    """Run the attention block on ``Pbar (B, k, 3n)`` (or a single ``(k, 3n)``).

    Returns ``(idx, p, ens, A)``: block index per sample, the selected ``(k, n)``
    block, the ensemble ``A * Pbar`` and the scores ``A (B, 3n)``.
    """
    pbar = as_tensor(pbar)
    squeeze = pbar.ndim == 2
    pb = pbar[None] if squeeze else pbar
    n = attention.n
    A = attention.forward(pb)
    idx = select_blocks(A, n, rule, per_sample)
    p = take_blocks(pb, idx, n)
    ens = A[:, None, :] * pb
    if squeeze:
        return int(idx[0]), p[0], ens[0], A
    return idx, p, ens, A


def take_blocks(pbar: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    cols = idx[:, None] * n + np.arange(n)[None, :]  # (B, n)
    return np.take_along_axis(pbar, cols[:, None, :], axis=2)


@dataclass
class SelectionRecord:
    epoch: int
    batch: int
    scores: np.ndarray  # (3,) per-block means of softmax(A), batch-averaged
    selected: str
    rule: str
    attention: np.ndarray  # (B, 3n) raw scores A
    per_sample: np.ndarray  # (B,) block index actually used per sample

    def csv_row(self) -> list:
        return [self.epoch, self.batch, *(f"{s:.10g}" for s in self.scores), self.selected]


def make_record(A: np.ndarray, idx: np.ndarray, n: int, rule: str, epoch: int = -1, batch: int = -1) -> SelectionRecord:
    scores = block_means(softmax(A), n).mean(axis=0)
    counts = np.bincount(idx, minlength=3)
    return SelectionRecord(epoch, batch, scores, BLOCKS[int(counts.argmax())], rule, A.copy(), idx.copy())


# ---------------------------------------------------------------------------
# losses

def kl_div(y_cls: np.ndarray, y_dpl: np.ndarray) -> float:
    """Batch mean of ``sum_c y_dpl * log(y_dpl / y_cls)`` with ``0 log 0 = 0``."""
    y_cls = np.atleast_2d(as_tensor(y_cls))
    y_dpl = np.atleast_2d(as_tensor(y_dpl))
    ratio = np.log(np.where(y_dpl > 0, y_dpl, 1.0)) - np.log(np.maximum(y_cls, PROB_FLOOR))
    return float(np.where(y_dpl > 0, y_dpl * ratio, 0.0).sum(axis=1).mean())


def kl_div_logits(logits_cls: np.ndarray, logits_dpl: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """KL value and its gradients w.r.t. both heads' logits (no stop-gradient)."""
    logp_raw = log_softmax(logits_cls)
    floored = logp_raw < np.log(PROB_FLOOR)
    logp = np.where(floored, np.log(PROB_FLOOR), logp_raw)
    logq = log_softmax(logits_dpl)
    q = np.exp(logq)
    per = (q * (logq - logp)).sum(axis=1)
    B = logits_cls.shape[0]
    g_logp = np.where(floored, 0.0, -q)
    p = np.exp(logp_raw)
    g_cls = g_logp - p * g_logp.sum(axis=1, keepdims=True)
    g_dpl = q * (logq - logp - per[:, None])
    return float(per.mean()), g_cls / B, g_dpl / B


def weighted_nll(probs: np.ndarray, targets, class_weights=None) -> float:
    probs = np.atleast_2d(as_tensor(probs))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    w = np.ones(probs.shape[1]) if class_weights is None else as_tensor(class_weights)
    ws = w[targets]
    nll = -np.log(np.maximum(probs[np.arange(len(targets)), targets], PROB_FLOOR))
    return float((ws * nll).sum() / ws.sum())


def perspective_loss(y_cls, y_dpl, targets, class_weights=None) -> float:
    """KL(y_cls, y_dpl) plus the DPLN cross-entropy."""
    return kl_div(y_cls, y_dpl) + weighted_nll(y_dpl, targets, class_weights)


def perspective_loss_logits(logits_cls, logits_dpl, targets, class_weights=None):
    kl, g_cls, g_dpl = kl_div_logits(logits_cls, logits_dpl)
    ce, g_ce = cross_entropy(logits_dpl, targets, class_weights)
    return kl + ce, g_cls, g_dpl + g_ce


def attn_loss(y_cls, y_dpl) -> float:
    """Negative batch-mean inner product of the two heads' probabilities."""
    y_cls = np.atleast_2d(as_tensor(y_cls))
    y_dpl = np.atleast_2d(as_tensor(y_dpl))
    return float(-(y_cls * y_dpl).sum(axis=1).mean())


def attn_loss_logits(logits_cls, logits_dpl) -> tuple[float, np.ndarray, np.ndarray]:
    p, q = softmax(logits_cls), softmax(logits_dpl)
    B = p.shape[0]
    value = float(-(p * q).sum(axis=1).mean())
    return value, softmax_backward(p, -q / B), softmax_backward(q, -p / B)


# ---------------------------------------------------------------------------
# model

@dataclass
class ModelConfig:
    d: int
    C: int
    t: int
    pooling: str = "somtp"
    backbone: str = "fcn"
    n: int = 4
    gtp_op: str = "avg"
    stp_op: str = "avg"
    dtp_op: str = "max"
    selection_op: str = "max"
    gamma: float = 1.0
    per_sample_selection: bool = False
    widths: tuple[int, ...] | None = None
    kernels: tuple[int, ...] | None = None
    hidden: tuple[int, ...] = (512, 1024)
    seed: int = 10

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        for name in ("gtp_op", "stp_op", "dtp_op", "selection_op"):
            if getattr(self, name) not in pooling.OPS:
                raise ValueError(f"{name} must be 'max' or 'avg'")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.pooling != "gtp" and self.n > self.t:
            raise ValueError(f"n={self.n} segments exceed series length t={self.t}")

    @property
    def segments(self) -> int:
        return 1 if self.pooling == "gtp" else self.n


@dataclass
class ForwardOut:
    logits_cls: np.ndarray
    probs_cls: np.ndarray
    logits_dpl: np.ndarray | None = None
    probs_dpl: np.ndarray | None = None
    record: SelectionRecord | None = None
    proto_values: np.ndarray | None = None


class SoMTPModel(Module):
    """Encoder + pooling block + CLS head (+ attention and DPLN for ``somtp``).

    ``pooling`` may also be a single ``gtp``/``stp``/``dtp`` baseline, in which
    case the attention block and DPLN are never built.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = build_encoder(cfg.backbone, cfg.d, rng, cfg.widths, cfg.kernels)
        k = self.encoder.k
        self.k = k
        n = cfg.segments
        self.cls_head = build_head(HeadSpec(k * n, tuple(cfg.hidden), cfg.C), rng)
        self.dpln_head = None
        self.attention = None
        self.prototypes = None
        if cfg.pooling == "somtp":
            self.dpln_head = build_head(HeadSpec(k * n * 3, tuple(cfg.hidden), cfg.C), rng)
            self.attention = Attention(k, n, rng)
        if cfg.pooling in ("dtp", "somtp"):
            self.prototypes = Prototypes(k, n, rng, cfg.gamma)
        self._cache = None

    def children(self) -> dict[str, Module]:
        out: dict[str, Module] = {"encoder": self.encoder, "cls": self.cls_head}
        if self.dpln_head is not None:
            out["dpln"] = self.dpln_head
            out["attention"] = self.attention
        if self.prototypes is not None:
            out["prototypes"] = self.prototypes
        return out

    def group_of(self, qualified: str) -> str:
        if qualified == "attention.A0":
            return "a0"
        if qualified.startswith("attention.phi0"):
            return "phi0"
        return qualified.split(".", 1)[0]

    # -- forward ---------------------------------------------------------

    def pool(self, H: np.ndarray):
        """Pooled block(s) and traces for the configured pooling kind."""
        cfg = self.cfg
        out = {}
        if cfg.pooling in ("gtp", "somtp"):
            out["gtp"] = pooling.gtp(H, cfg.gtp_op)
        if cfg.pooling in ("stp", "somtp"):
            out["stp"] = pooling.stp(H, cfg.n, cfg.stp_op)
        proto_values = None
        if cfg.pooling in ("dtp", "somtp"):
            lengths, proto_values = self.prototypes.align(H)
            out["dtp"] = pooling.dtp(H, lengths, cfg.dtp_op)
        return out, proto_values

    def forward(self, x: np.ndarray, dpln: bool | None = None, selection: np.ndarray | None = None,
                epoch: int = -1, batch: int = -1) -> ForwardOut:
        """Forward pass; ``dpln`` defaults to ``self.training``.

        ``selection`` forces the block index per sample (used by gradient checks,
        where the hard choice must stay fixed under perturbation).
        """
        x = as_tensor(x)
        if x.ndim == 2:
            x = x[None]
        cfg = self.cfg
        if x.shape[1] != cfg.d:
            raise ValueError(f"input has {x.shape[1]} channels, model expects {cfg.d}")
        use_dpln = self.training if dpln is None else dpln
        use_dpln = use_dpln and self.dpln_head is not None
        H = self.encoder.forward(x)
        pooled, proto_values = self.pool(H)
        B = H.shape[0]
        record = None
        A = pbar = idx = None
        if cfg.pooling == "somtp":
            n = cfg.n
            pbar = build_pbar(pooled["gtp"][0], pooled["stp"][0], pooled["dtp"][0])
            A = self.attention.forward(pbar)
            if selection is None:
                idx = select_blocks(A, n, cfg.selection_op, cfg.per_sample_selection)
            else:
                idx = np.broadcast_to(np.asarray(selection, dtype=np.int64), (B,)).copy()
            p = take_blocks(pbar, idx, n)
            record = make_record(A, idx, n, cfg.selection_op, epoch, batch)
        else:
            p = pooled[cfg.pooling][0]
        logits_cls = self.cls_head.forward(p.reshape(B, -1))
        out = ForwardOut(logits_cls, softmax(logits_cls), record=record, proto_values=proto_values)
        if use_dpln:
            ens = A[:, None, :] * pbar
            out.logits_dpl = self.dpln_head.forward(ens.reshape(B, -1))
            out.probs_dpl = softmax(out.logits_dpl)
        self._cache = dict(H_shape=H.shape, pooled=pooled, pbar=pbar, A=A, idx=idx, dpln=use_dpln)
        return out

    # -- backward --------------------------------------------------------

    def backward_attention(self, g_logits_dpl: np.ndarray) -> None:
        """Push an attention-loss gradient into ``A0`` only (other grads are scratch)."""
        c = self._cache
        B = g_logits_dpl.shape[0]
        g_ens = self.dpln_head.backward(g_logits_dpl).reshape(c["pbar"].shape)
        g_A = (g_ens * c["pbar"]).sum(axis=1)
        self.attention.backward(g_A, a0_grad=True)

    def backward(self, g_logits_cls: np.ndarray, g_logits_dpl: np.ndarray | None = None) -> np.ndarray:
        """Backpropagate head-logit gradients to every parameter except ``A0`` and prototypes.

        Returns the gradient w.r.t. the model input.
        """
        c = self._cache
        cfg = self.cfg
        B = g_logits_cls.shape[0]
        gp = self.cls_head.backward(g_logits_cls).reshape(B, self.k, -1)
        pooled = c["pooled"]
        if cfg.pooling != "somtp":
            gH = pooling.pool_backward(gp, pooled[cfg.pooling][1])
            return self.encoder.backward(gH)
        n = cfg.n
        pbar, A, idx = c["pbar"], c["A"], c["idx"]
        g_pbar = np.zeros_like(pbar)
        cols = idx[:, None] * n + np.arange(n)[None, :]
        np.put_along_axis(g_pbar, cols[:, None, :], gp, axis=2)
        if g_logits_dpl is not None and c["dpln"]:
            g_ens = self.dpln_head.backward(g_logits_dpl).reshape(pbar.shape)
            g_pbar += A[:, None, :] * g_ens
            g_A = (g_ens * pbar).sum(axis=1)
            g_pbar += self.attention.backward(g_A, a0_grad=False)
        g_g = g_pbar[:, :, :n].sum(axis=2, keepdims=True)
        gH = (pooling.pool_backward(g_g, pooled["gtp"][1])
              + pooling.pool_backward(g_pbar[:, :, n:2 * n], pooled["stp"][1])
              + pooling.pool_backward(g_pbar[:, :, 2 * n:], pooled["dtp"][1]))
        return self.encoder.backward(gH)

    def quantize_(self) -> None:
        """Round every parameter and buffer to float32 precision in place."""
        for arr in self.state_dict().values():
            arr[...] = arr.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# training step

@dataclass
class StepLosses:
    cls: float
    perspective: float = 0.0
    attn: float = 0.0
    proto: float = 0.0
    cost: float = 0.0


@dataclass
class Optimizers:
    cost: Adam
    a0: Adam | None
    proto: Adam | None
    frozen: frozenset = field(default_factory=frozenset)


def make_optimizers(model: SoMTPModel, lr: float = 1e-4, frozen=()) -> Optimizers:
    frozen = frozenset(frozen)
    unknown = frozen - set(PARAM_GROUPS)
    if unknown:
        raise ValueError(f"unknown parameter groups {sorted(unknown)}; expected {PARAM_GROUPS}")
    cost, a0, proto = {}, {}, {}
    for q, (p, g) in model.param_refs().items():
        group = model.group_of(q)
        if group in frozen:
            continue
        if group == "a0":
            a0[q] = (p, g)
        elif group == "prototypes":
            proto[q] = (p, g)
        else:
            cost[q] = (p, g)
    return Optimizers(Adam(cost, lr), Adam(a0, lr) if a0 else None, Adam(proto, lr) if proto else None, frozen)


def compute_losses(out: ForwardOut, y, lam: float, class_weights=None):
    """Losses and logit gradients; returns ``(StepLosses, g_cls, g_dpl, g_attn_dpl)``."""
    l_cls, g_cls = cross_entropy(out.logits_cls, y, class_weights)
    losses = StepLosses(cls=l_cls, cost=l_cls)
    g_dpl = g_attn = None
    if out.logits_dpl is not None:
        persp, gc_p, gd_p = perspective_loss_logits(out.logits_cls, out.logits_dpl, y, class_weights)
        attn, _, g_attn = attn_loss_logits(out.logits_cls, out.logits_dpl)
        losses.perspective, losses.attn = persp, attn
        losses.cost = l_cls + lam * persp
        g_cls = g_cls + lam * gc_p
        g_dpl = lam * gd_p
    return losses, g_cls, g_dpl, g_attn


def train_step(model: SoMTPModel, opt: Optimizers, x: np.ndarray, y, lam: float,
               class_weights=None, epoch: int = -1, batch: int = -1) -> tuple[StepLosses, SelectionRecord | None]:
    """One optimisation step with the three gradient routes."""
    model.train()
    out = model.forward(x, epoch=epoch, batch=batch)
    losses, g_cls, g_dpl, g_attn = compute_losses(out, y, lam, class_weights)
    if not np.isfinite(losses.cost):
        raise FloatingPointError(f"non-finite loss at epoch {epoch} batch {batch}: {losses}")
    a0_grad = None
    if g_attn is not None and opt.a0 is not None:
        model.dpln_head.zero_grad()
        model.attention.zero_grad()
        model.backward_attention(g_attn)
        a0_grad = model.attention.grads["A0"].copy()
    model.zero_grad()
    model.backward(g_cls, g_dpl)
    if model.prototypes is not None:
        losses.proto = model.prototypes.loss_backward()
    if a0_grad is not None:
        model.attention.grads["A0"][...] = a0_grad
    for name, (p, g) in opt.cost.refs.items():
        check_finite(g, f"gradient of {name}")
    opt.cost.step()
    if a0_grad is not None:
        opt.a0.step()
    if opt.proto is not None:
        opt.proto.step()
    model.clear_cache()
    return losses, out.record
