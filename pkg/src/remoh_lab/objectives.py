"""Sparsity control for routed heads: SPR with adaptive weight, HAE, total loss.

Sparsity is always measured on post-ReLU routed gates.  The counted value
(fraction of gates that are exactly zero) drives the weight schedule and the
HAE trigger; a clipped-linear surrogate supplies HAE's gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, NumericError
from .tensor import Tensor, add_const, clip_max, exp, mean, reshape, scale, take

BETA_MIN = 1e-6
BETA_MAX = 10.0


def target_sparsity(m: int, b: int) -> float:
    """Fraction of routed heads that should be inactive when ``b`` of ``m`` fire."""
    if m < 1 or not 1 <= b <= m:
        raise ConfigurationError(f"target sparsity needs 1 <= b <= m, got b={b}, m={m}")
    return 1.0 - b / m


@dataclass
class SparsityState:
    m: int
    b: int
    beta: float = 0.01
    k_scale: float = 2.0
    eps_indicator: float = 0.01
    beta_min: float = BETA_MIN
    beta_max: float = BETA_MAX
    step: int = 0
    T_s: float = field(init=False)

    def __post_init__(self):
        self.T_s = target_sparsity(self.m, self.b)
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ConfigurationError("beta must be finite and positive")
        if self.k_scale <= 0 or self.eps_indicator <= 0:
            raise ConfigurationError("k_scale and eps_indicator must be positive")

    def advance(self, R_s: float) -> float:
        self.beta = beta_update(self, R_s)
        self.step += 1
        return self.beta


def _valid_rows(routed: np.ndarray, row_mask) -> np.ndarray:
    flat = np.asarray(routed, dtype=np.float64).reshape(-1, routed.shape[-1])
    if row_mask is None:
        return flat
    return flat[np.asarray(row_mask, dtype=bool).reshape(-1)]


def counted_sparsity(routed, row_mask=None) -> float:
    """Fraction of (token, routed head) pairs whose gate is exactly zero.

    ``routed`` is one array of shape ``... x m`` or a sequence of them (one
    per layer or per sample); masks follow the same structure.
    """
    if isinstance(routed, (list, tuple)):
        masks = row_mask if row_mask is not None else [None] * len(routed)
        parts = [_valid_rows(r.data if isinstance(r, Tensor) else r, mk) for r, mk in zip(routed, masks)]
        parts = [p for p in parts if p.size]
        if not parts:
            raise ValueError("counted_sparsity needs a nonempty batch")
        zeros = sum(int((p == 0.0).sum()) for p in parts)
        return zeros / sum(p.size for p in parts)
    arr = routed.data if isinstance(routed, Tensor) else np.asarray(routed)
    if arr.ndim == 0 or arr.shape[-1] < 1:
        raise ValueError("counted_sparsity needs at least one routed head")
    flat = _valid_rows(arr, row_mask)
    if flat.size == 0:
        raise ValueError("counted_sparsity needs a nonempty batch")
    return float((flat == 0.0).mean())


def _masked_entries(routed: Tensor, row_mask) -> Tensor:
    flat = reshape(routed, (-1, routed.shape[-1])) if routed.ndim != 2 else routed
    if row_mask is None:
        return flat
    idx = np.flatnonzero(np.asarray(row_mask, dtype=bool).reshape(-1))
    if idx.size == flat.shape[0]:
        return flat
    return take(flat, idx, axis=0)


def soft_sparsity(routed: Tensor, eps: float, row_mask=None) -> Tensor:
    """Differentiable sparsity ``1 - mean(min(s / eps, 1))``."""
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    s = _masked_entries(routed, row_mask)
    return add_const(scale(mean(clip_max(scale(s, 1.0 / eps), 1.0)), -1.0), np.array(1.0))


def spr_loss(routed: Tensor, state: SparsityState, row_mask=None) -> Tensor:
    """``beta * mean_t (1/m) sum_i s_i``, the weighted L1 norm of routed gates."""
    if state.beta < 0:
        raise ConfigurationError("beta must be nonnegative")
    s = _masked_entries(routed, row_mask)
    return scale(mean(s), state.beta)


def beta_update(state: SparsityState, R_s: float) -> float:
    """``beta * exp(k (T_s - R_s))`` clamped to ``[beta_min, beta_max]``."""
    nxt = state.beta * math.exp(state.k_scale * (state.T_s - R_s))
    return float(min(max(nxt, state.beta_min), state.beta_max))


def hae_loss(soft: Tensor, R_s: float, T_s: float) -> Tensor:
    """``exp(2 (soft - T_s)) - 1`` when counted sparsity exceeds target, else 0."""
    if R_s > T_s:
        return add_const(exp(add_const(scale(soft, 2.0), np.array(-2.0 * T_s))), np.array(-1.0))
    return Tensor(0.0)


@dataclass
class LossBreakdown:
    lm: float
    spr: float
    hae: float
    total: float
    tensor: Tensor | None = None

    def as_dict(self) -> dict[str, float]:
        return {"lm": self.lm, "spr": self.spr, "hae": self.hae, "total": self.total}


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def total_loss(lm, spr, hae) -> LossBreakdown:
    """Sum the three objective terms, keeping each component.

    Raises :class:`NumericError` if any component is non-finite.
    """
    vals = [_value(lm), _value(spr), _value(hae)]
    for name, v in zip(("lm", "spr", "hae"), vals):
        if not math.isfinite(v):
            raise NumericError(f"non-finite {name} loss: {v}")
    tensors = [x for x in (lm, spr, hae) if isinstance(x, Tensor)]
    t = None
    if tensors:
        t = tensors[0]
        for x in tensors[1:]:
            t = t + x
    return LossBreakdown(vals[0], vals[1], vals[2], vals[0] + vals[1] + vals[2], t)


def layerwise(routed_per_layer: Sequence[Tensor], masks: Sequence, state: SparsityState, use_spr: bool, use_hae: bool):
    """SPR and HAE summed over layers plus the pooled counted sparsity.

    Returns ``(spr, hae, R_s, per_layer)`` where ``per_layer`` lists
    ``(R_s_layer, soft_layer, hae_layer)`` floats for telemetry.
    """
    spr_total: Tensor | float = 0.0
    hae_total: Tensor | float = 0.0
    per_layer = []
    for r, mk in zip(routed_per_layer, masks):
        rs = counted_sparsity(r.data, mk)
        soft = soft_sparsity(r, state.eps_indicator, mk)
        h = hae_loss(soft, rs, state.T_s) if use_hae else Tensor(0.0)
        if use_spr:
            term = spr_loss(r, state, mk)
            spr_total = term if isinstance(spr_total, float) else spr_total + term
        if use_hae and rs > state.T_s:
            hae_total = h if isinstance(hae_total, float) else hae_total + h
        per_layer.append((rs, float(soft.data), float(h.data)))
    R_s = counted_sparsity([r.data for r in routed_per_layer], list(masks))
    return spr_total, hae_total, R_s, per_layer
