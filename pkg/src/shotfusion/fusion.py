"""Gated weighted fusion, concatenation baseline, reduction head and loss.

Class indices are fixed: 0 = sober, 1 = intoxicated.
"""
from __future__ import annotations

import numpy as np

from .autodiff import (
    DEFAULT_DTYPE,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    getitem,
    record_op,
    reduce_mean,
    reshape,
    sigmoid,
)
from .nn import BatchNorm, Linear, Module, activation, dropout, linear, log_softmax, param

SOBER, INTOXICATED = 0, 1
CLASS_NAMES = ("sober", "intoxicated")
FUSION_MODES = ("gated", "global")
# sigmoid(+-30) is 1e-13 away from the ends, so the weight never rounds to exactly 0 or 1
GATE_LOGIT_LIMIT = 30.0


class FusionGate(Module):
    """Either a per-sample gate FC([F_vis || F_land]) -> 1, or one global logit."""

    def __init__(self, d_model: int, mode: str = "gated", rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
        self.mode = mode
        self.d_model = d_model
        if mode == "gated":
            self.gate = Linear(2 * d_model, 1, rng if rng is not None else np.random.default_rng(0), dtype)
            self.global_alpha_logit = None
        else:
            self.gate = None
            self.global_alpha_logit = param(np.zeros((), dtype=dtype))


def clamp_logit(z: Tensor, limit: float = GATE_LOGIT_LIMIT) -> Tensor:
    zd = z.data
    inside = np.abs(zd) <= limit

    def fn(g):
        return (np.where(inside, g, 0.0),)

    return record_op("clamp_logit", np.clip(zd, -limit, limit), (z,), fn)


def gate_alpha(F_vis: Tensor, F_land: Tensor, p: FusionGate) -> Tensor:
    """alpha in (0, 1): shape [..., 1] in gated mode, a scalar in global mode."""
    F_vis, F_land = as_tensor(F_vis), as_tensor(F_land)
    if F_vis.shape != F_land.shape or F_vis.shape[-1] != p.d_model:
        raise ShapeError(f"fusion inputs must both be [..., {p.d_model}], got {F_vis.shape} and {F_land.shape}")
    if p.mode == "global":
        return sigmoid(clamp_logit(p.global_alpha_logit))
    return sigmoid(clamp_logit(linear(concat([F_vis, F_land], axis=-1), p.gate)))


def fuse(F_vis: Tensor, F_land: Tensor, alpha) -> Tensor:
    """alpha * F_vis + (1 - alpha) * F_land, evaluated as F_land + alpha * (F_vis - F_land).

    That form is exactly linear in alpha and exact when the inputs coincide;
    alpha == 1 returns F_vis bit-for-bit.
    """
    F_vis, F_land = as_tensor(F_vis), as_tensor(F_land)
    if F_vis.shape != F_land.shape:
        raise ShapeError(f"fuse needs equal shapes, got {F_vis.shape} and {F_land.shape}")
    alpha = as_tensor(alpha)
    a = alpha.data
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("fusion weight must lie in [0, 1]")
    v, l = F_vis.data, F_land.data
    diff = v - l
    out = np.where(a == 1, v, l + a * diff)
    ashape = alpha.shape

    def fn(g):
        ga = g * diff
        lead = ga.ndim - len(ashape)
        if lead:
            ga = ga.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, n in enumerate(ashape) if n == 1 and ga.shape[i] != 1)
        if axes:
            ga = ga.sum(axis=axes, keepdims=True)
        return g * a, g * (1 - a), ga.reshape(ashape)

    return record_op("fuse", out, (F_vis, F_land, alpha), fn)


def concat_fuse(F_vis: Tensor, F_land: Tensor) -> Tensor:
    """[F_vis || F_land] along the last axis (visual first)."""
    return concat([as_tensor(F_vis), as_tensor(F_land)], axis=-1)


class ReductionHead(Module):
    """fc1 -> BN -> act -> dropout -> fc2 -> BN -> act -> dropout -> fc_out (2 logits)."""

    def __init__(self, d_in: int, d_model: int, rng: np.random.Generator, dropout_rate: float = 0.5,
                 act: str = "leaky_relu", bn_momentum: float = 0.1, bn_eps: float = 1e-5,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        d1, d2 = d_model // 2, d_model // 4
        self.act = act
        self.dropout_rate = dropout_rate
        self.fc1 = Linear(d_in, d1, rng, dtype)
        self.bn1 = BatchNorm(d1, bn_momentum, bn_eps, dtype)
        self.fc2 = Linear(d1, d2, rng, dtype)
        self.bn2 = BatchNorm(d2, bn_momentum, bn_eps, dtype)
        self.fc_out = Linear(d2, 2, rng, dtype)


def reduce_head(x: Tensor, p: ReductionHead, rng: np.random.Generator | None = None) -> Tensor:
    """[B, d_in] -> [B, 2] logits.  Single vectors are treated as a batch of one."""
    x = as_tensor(x)
    single = x.ndim == 1
    if single:
        x = reshape(x, (1,) + x.shape)
    rng = rng if rng is not None else np.random.default_rng(0)
    h = dropout(activation(p.bn1(p.fc1(x)), p.act), p.dropout_rate, p.training, rng)
    h = dropout(activation(p.bn2(p.fc2(h)), p.act), p.dropout_rate, p.training, rng)
    out = p.fc_out(h)
    return getitem(out, 0) if single else out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch (log-sum-exp form)."""
    logits = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels))
    if not np.issubdtype(labels.dtype, np.integer) or np.any((labels < 0) | (labels >= logits.shape[-1])):
        raise ValueError(f"labels must be integers in [0, {logits.shape[-1]}), got {labels.tolist()}")
    lp = log_softmax(logits, axis=-1)
    if lp.ndim == 1:
        if labels.size != 1:
            raise ShapeError("one logit vector needs exactly one label")
        return -getitem(lp, int(labels[0]))
    if labels.shape != lp.shape[:1]:
        raise ShapeError(f"{lp.shape[0]} logit rows but {labels.size} labels")
    picked = getitem(lp, (np.arange(lp.shape[0]), labels))
    return -reduce_mean(picked)
