"""Multi-head attention, top-k mixture-of-heads, and ReLU-routed mixture-of-heads.

Projection matrices are stored in concatenated form: ``W_Q`` is
``d_in x (h*d_k)`` and head ``i`` owns columns ``i*d_k:(i+1)*d_k``; ``W_O`` is
``(h*d_v) x d_out`` and head ``i`` owns the matching row block.  All forward
functions accept either ``T x d_in`` inputs or a batch ``B x T x d_in``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigurationError, DimensionError
from .tensor import (
    Tensor,
    add,
    add_const,
    concat,
    matmul,
    relu,
    reshape,
    scale,
    scale_rows,
    softmax_rows,
    take,
    transpose,
)

MASK_FILL = -1e9


@dataclass(frozen=True)
class AttentionDims:
    d_in: int
    h: int
    n: int
    m: int
    d_k: int | None = None
    d_v: int | None = None
    d_out: int | None = None

    def __post_init__(self):
        if self.h < 1 or self.n < 0 or self.m < 0 or self.n + self.m != self.h:
            raise ConfigurationError(f"need h >= 1 and n + m == h, got h={self.h}, n={self.n}, m={self.m}")
        if self.d_in < 1:
            raise ConfigurationError("d_in must be positive")
        default = max(1, self.d_in // self.h)
        for name in ("d_k", "d_v"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, default)
        if self.d_out is None:
            object.__setattr__(self, "d_out", self.d_in)
        if min(self.d_k, self.d_v, self.d_out) < 1:
            raise ConfigurationError("d_k, d_v and d_out must be positive")


@dataclass
class AttentionWeights:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor

    def head(self, i: int, dims: AttentionDims) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Per-head blocks ``(W_Q^i, W_K^i, W_V^i, W_O^i)`` as arrays."""
        qk = slice(i * dims.d_k, (i + 1) * dims.d_k)
        v = slice(i * dims.d_v, (i + 1) * dims.d_v)
        return self.W_Q.data[:, qk], self.W_K.data[:, qk], self.W_V.data[:, v], self.W_O.data[v, :]

    def tensors(self) -> list[Tensor]:
        return [self.W_Q, self.W_K, self.W_V, self.W_O]


@dataclass
class RouterWeights:
    W_r: Tensor  # m x d_in
    b_r: Tensor  # m
    W_h: Tensor  # 2 x d_in
    b_h: Tensor  # 2

    def tensors(self) -> list[Tensor]:
        return [self.W_r, self.b_r, self.W_h, self.b_h]


@dataclass
class HeadScores:
    scores: Tensor  # ... x T x h
    alpha1: Tensor  # ... x T
    alpha2: Tensor  # ... x T
    routed: Tensor | None  # ... x T x m, post-ReLU router output (before alpha2)

    def routed_scores(self, dims: AttentionDims) -> np.ndarray:
        return self.scores.data[..., dims.n:]


@dataclass
class ActivationTrace:
    """Per-routed-head count of tokens with a positive gate."""

    layer: int
    active: np.ndarray
    total: int
    label: str | None = None

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=np.int64)
        if np.any(self.active > self.total) or np.any(self.active < 0):
            raise ValueError("active counts must lie in [0, total]")


def check_weights(w: AttentionWeights, dims: AttentionDims) -> None:
    expect = {
        "W_Q": (dims.d_in, dims.h * dims.d_k),
        "W_K": (dims.d_in, dims.h * dims.d_k),
        "W_V": (dims.d_in, dims.h * dims.d_v),
        "W_O": (dims.h * dims.d_v, dims.d_out),
    }
    for name, shape in expect.items():
        got = getattr(w, name).shape
        if got != shape:
            raise DimensionError(f"{name}: expected {shape}, got {got}")


def init_attention(dims: AttentionDims, rng: np.random.Generator, d_kv: int | None = None) -> AttentionWeights:
    """Uniform(+-1/sqrt(fan_in)) projections; ``d_kv`` overrides the key/value input width."""
    d_kv = dims.d_in if d_kv is None else d_kv
    a = 1.0 / math.sqrt(dims.d_in)
    b = 1.0 / math.sqrt(d_kv)
    o = 1.0 / math.sqrt(dims.h * dims.d_v)
    return AttentionWeights(
        W_Q=Tensor(rng.uniform(-a, a, (dims.d_in, dims.h * dims.d_k)), True, "W_Q"),
        W_K=Tensor(rng.uniform(-b, b, (d_kv, dims.h * dims.d_k)), True, "W_K"),
        W_V=Tensor(rng.uniform(-b, b, (d_kv, dims.h * dims.d_v)), True, "W_V"),
        W_O=Tensor(rng.uniform(-o, o, (dims.h * dims.d_v, dims.d_out)), True, "W_O"),
    )


def init_routers(dims: AttentionDims, rng: np.random.Generator, routed_bias: float = 0.1) -> RouterWeights:
    a = 1.0 / math.sqrt(dims.d_in)
    return RouterWeights(
        W_r=Tensor(rng.uniform(-a, a, (dims.m, dims.d_in)), True, "W_r"),
        b_r=Tensor(np.full(dims.m, routed_bias), True, "b_r"),
        W_h=Tensor(rng.uniform(-a, a, (2, dims.d_in)), True, "W_h"),
        b_h=Tensor(np.zeros(2), True, "b_h"),
    )


# ---------------------------------------------------------------------------
# attention

def _key_bias(key_mask, ndim: int):
    """Additive bias for ``key_mask`` (True = attend), shaped to broadcast over scores."""
    if key_mask is None:
        return None
    km = np.asarray(key_mask, dtype=bool)
    bias = np.where(km, 0.0, MASK_FILL)
    # scores are (..., h, T1, T2) or (..., T1, T2); key_mask is (..., T2)
    while bias.ndim < ndim:
        bias = np.expand_dims(bias, -2)
    return bias


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, key_mask=None) -> Tensor:
    """``softmax_rows(Q K^T / sqrt(d_k)) V``."""
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention: Q {Q.shape}, K {K.shape}, V {V.shape} are inconsistent")
    logits = scale(matmul(Q, transpose(K)), 1.0 / math.sqrt(Q.shape[-1]))
    bias = _key_bias(key_mask, logits.ndim)
    if bias is not None:
        logits = add_const(logits, bias)
    return matmul(softmax_rows(logits), V)


def _split_heads(x: Tensor, h: int) -> Tensor:
    # (B, T, h*d) -> (B, h, T, d)
    B, T, hd = x.shape
    return transpose(reshape(x, (B, T, h, hd // h)), (0, 2, 1, 3))


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise DimensionError(f"expected T x d or B x T x d input, got {x.shape}")


def attention_heads(x1: Tensor, x2: Tensor, w: AttentionWeights, dims: AttentionDims, key_mask=None) -> Tensor:
    """All head outputs ``H^i`` stacked as ``B x h x T1 x d_v``."""
    x1b, _ = _batched(x1)
    x2b, _ = _batched(x2)
    if x1b.shape[0] != x2b.shape[0]:
        raise DimensionError(f"batch mismatch: {x1.shape} vs {x2.shape}")
    if x1b.shape[-1] != w.W_Q.shape[0] or x2b.shape[-1] != w.W_K.shape[0]:
        raise DimensionError(
            f"input widths {x1b.shape[-1]}, {x2b.shape[-1]} do not match projections {w.W_Q.shape}, {w.W_K.shape}"
        )
    Q = _split_heads(matmul(x1b, w.W_Q), dims.h)
    K = _split_heads(matmul(x2b, w.W_K), dims.h)
    V = _split_heads(matmul(x2b, w.W_V), dims.h)
    km = None if key_mask is None else np.asarray(key_mask, dtype=bool).reshape(x2b.shape[0], 1, x2b.shape[1])
    return scaled_dot_attention(Q, K, V, km)


def _merge_heads(H: Tensor) -> Tensor:
    B, h, T, d = H.shape
    return reshape(transpose(H, (0, 2, 1, 3)), (B, T, h * d))


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def mha_forward(
    x1: Tensor, x2: Tensor, w: AttentionWeights, dims: AttentionDims, key_mask=None, form: str = "concat"
) -> Tensor:
    """Standard multi-head attention.

    ``form="concat"`` multiplies the concatenated heads by ``W_O``;
    ``form="sum"`` evaluates ``sum_i H^i W_O^i`` head by head.  Both give the
    same values and gradients.
    """
    check_weights(w, dims)
    _, squeeze = _batched(x1)
    if form == "concat":
        H = attention_heads(x1, x2, w, dims, key_mask)
        return _unbatch(matmul(_merge_heads(H), w.W_O), squeeze)
    if form != "sum":
        raise ValueError(f"unknown form {form!r}")
    x1b, _ = _batched(x1)
    x2b, _ = _batched(x2)
    km = None if key_mask is None else np.asarray(key_mask, dtype=bool).reshape(x2b.shape[0], x2b.shape[1])
    total = None
    for i in range(dims.h):
        qk = np.arange(i * dims.d_k, (i + 1) * dims.d_k)
        v = np.arange(i * dims.d_v, (i + 1) * dims.d_v)
        Hi = scaled_dot_attention(
            matmul(x1b, take(w.W_Q, qk, axis=1)),
            matmul(x2b, take(w.W_K, qk, axis=1)),
            matmul(x2b, take(w.W_V, v, axis=1)),
            km,
        )
        term = matmul(Hi, take(w.W_O, v, axis=0))
        total = term if total is None else add(total, term)
    return _unbatch(total, squeeze)


# ---------------------------------------------------------------------------
# routers and scores

def shared_router(w: RouterWeights, x_t: Tensor) -> Tensor:
    """``[alpha1, alpha2] = softmax(W_h x_t + b_h)`` over the last axis."""
    if x_t.ndim == 1:
        return reshape(shared_router(w, reshape(x_t, (1, x_t.shape[0]))), (2,))
    return softmax_rows(add(matmul(x_t, transpose(w.W_h)), w.b_h))


def router_logits(w: RouterWeights, x_t: Tensor) -> Tensor:
    if x_t.ndim == 1:
        return reshape(router_logits(w, reshape(x_t, (1, x_t.shape[0]))), (w.W_r.shape[0],))
    return add(matmul(x_t, transpose(w.W_r)), w.b_r)


def relu_router(w: RouterWeights, x_t: Tensor) -> Tensor:
    """``ReLU(W_r x_t + b_r)``; zeros mark inactive routed heads."""
    if w.W_r.shape[0] < 1:
        raise ConfigurationError("relu_router needs at least one routed head (m >= 1)")
    return relu(router_logits(w, x_t))


def _split_alpha(alpha: Tensor) -> tuple[Tensor, Tensor]:
    lead = alpha.shape[:-1]
    a1 = reshape(take(alpha, np.array([0]), axis=alpha.ndim - 1), lead)
    a2 = reshape(take(alpha, np.array([1]), axis=alpha.ndim - 1), lead)
    return a1, a2


def _broadcast_cols(col: Tensor, n: int) -> Tensor:
    # (..., T) -> (..., T, n) by multiplying with a ones row
    shaped = reshape(col, col.shape + (1,))
    return matmul(shaped, Tensor(np.ones((1, n))))


def head_scores(dims: AttentionDims, routers: RouterWeights | None, x_t: Tensor) -> HeadScores:
    """Per-token head gates: ``alpha1`` for shared heads, ``alpha2 * ReLU(W_r x_t)`` for routed.

    With ``m == 0`` the shared router is bypassed and every shared gate is
    exactly 1, which makes the layer reduce to plain multi-head attention.
    """
    single = x_t.ndim == 1
    x = reshape(x_t, (1, x_t.shape[0])) if single else x_t
    lead = x.shape[:-1]
    if dims.m == 0:
        ones = Tensor(np.ones(lead + (dims.n,)))
        a1 = Tensor(np.ones(lead))
        a2 = Tensor(np.zeros(lead))
        hs = HeadScores(ones, a1, a2, None)
    else:
        alpha = shared_router(routers, x)
        a1, a2 = _split_alpha(alpha)
        routed = relu_router(routers, x)
        gated = scale_rows(routed, a2)
        parts = ([_broadcast_cols(a1, dims.n)] if dims.n else []) + [gated]
        scores = concat(parts, axis=-1) if len(parts) > 1 else parts[0]
        hs = HeadScores(scores, a1, a2, routed)
    if single:
        return HeadScores(
            reshape(hs.scores, (dims.h,)),
            reshape(hs.alpha1, ()),
            reshape(hs.alpha2, ()),
            None if hs.routed is None else reshape(hs.routed, (dims.m,)),
        )
    return hs


def topk_scores(dims: AttentionDims, routers: RouterWeights, x_t: Tensor, k: int) -> HeadScores:
    """Top-k gates: softmax over the k largest router logits, times ``alpha2``."""
    if dims.m < 1 or not 1 <= k <= dims.m:
        raise ConfigurationError(f"top-k needs 1 <= k <= m, got k={k}, m={dims.m}")
    alpha = shared_router(routers, x_t)
    a1, a2 = _split_alpha(alpha)
    z = router_logits(routers, x_t)
    order = np.argsort(-z.data, axis=-1, kind="stable")[..., :k]
    keep = np.zeros(z.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=-1)
    gates = softmax_rows(add_const(z, np.where(keep, 0.0, MASK_FILL)))
    routed = scale_rows(gates, a2)
    parts = ([_broadcast_cols(a1, dims.n)] if dims.n else []) + [routed]
    scores = concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    return HeadScores(scores, a1, a2, gates)


# ---------------------------------------------------------------------------
# gated forward passes

def trace_from_scores(routed: np.ndarray, layer: int, row_mask=None, label: str | None = None) -> ActivationTrace:
    r = np.ascontiguousarray(np.asarray(routed, dtype=np.float64).reshape(-1, routed.shape[-1]))
    if row_mask is None:
        mask = np.ones(r.shape[0], dtype=np.bool_)
    else:
        mask = np.ascontiguousarray(np.asarray(row_mask, dtype=np.bool_).reshape(-1))
    return ActivationTrace(layer, _kernels.active_counts(r, mask), int(mask.sum()), label)


def gated_heads_forward(H: Tensor, scores: Tensor, w: AttentionWeights) -> Tensor:
    """``sum_i s_i(t) H^i(t) W_O^i`` for ``H`` of shape ``B x h x T x d_v``.

    The gate multiplies each head's rows before the output projection, which
    equals gating after ``W_O^i`` because the product is associative.
    """
    s = transpose(scores, (0, 2, 1))  # B x h x T
    return matmul(_merge_heads(scale_rows(H, s)), w.W_O)


def remoh_forward(
    x1: Tensor,
    x2: Tensor,
    w: AttentionWeights,
    routers: RouterWeights | None,
    dims: AttentionDims,
    key_mask=None,
    row_mask=None,
    layer: int = 0,
    return_scores: bool = False,
):
    """ReLU-routed mixture-of-heads attention. Returns ``(output, trace)``.

    Gates come from the query-side rows of ``x1``.  ``row_mask`` excludes
    padding rows from the activation trace only.
    """
    check_weights(w, dims)
    x1b, squeeze = _batched(x1)
    H = attention_heads(x1b, x2, w, dims, key_mask)
    hs = head_scores(dims, routers, x1b)
    out = _unbatch(gated_heads_forward(H, hs.scores, w), squeeze)
    routed = hs.scores.data[..., dims.n:]
    trace = trace_from_scores(routed, layer, row_mask) if dims.m else ActivationTrace(layer, np.zeros(0), _count(x1b, row_mask))
    if return_scores:
        return out, trace, hs
    return out, trace


def _count(x1b: Tensor, row_mask) -> int:
    return int(np.prod(x1b.shape[:-1])) if row_mask is None else int(np.asarray(row_mask, bool).sum())


def moh_topk_forward(
    x1: Tensor,
    x2: Tensor,
    w: AttentionWeights,
    routers: RouterWeights,
    dims: AttentionDims,
    k: int,
    key_mask=None,
    row_mask=None,
    layer: int = 0,
    return_scores: bool = False,
):
    """Mixture-of-heads baseline: exactly ``k`` routed heads per token."""
    check_weights(w, dims)
    x1b, squeeze = _batched(x1)
    hs = topk_scores(dims, routers, x1b, k)
    H = attention_heads(x1b, x2, w, dims, key_mask)
    out = _unbatch(gated_heads_forward(H, hs.scores, w), squeeze)
    trace = trace_from_scores(hs.scores.data[..., dims.n:], layer, row_mask)
    if return_scores:
        return out, trace, hs
    return out, trace


# ---------------------------------------------------------------------------
# summaries

TRACE_COLUMNS = ("layer", "head_index", "rate_present", "rate_absent", "tokens_present", "tokens_absent")


@dataclass
class HeatmapRow:
    layer: int
    head_index: int
    rate_present: float | None
    rate_absent: float | None
    tokens_present: int
    tokens_absent: int

    @property
    def delta(self) -> float | None:
        if self.rate_present is None or self.rate_absent is None:
            return None
        return self.rate_present - self.rate_absent


@dataclass
class HeatmapTable:
    rows: list[HeatmapRow] = field(default_factory=list)

    def layers(self) -> list[int]:
        return sorted({r.layer for r in self.rows})

    def for_layer(self, layer: int) -> list[HeatmapRow]:
        return [r for r in self.rows if r.layer == layer]

    def max_abs_delta(self, layer: int | None = None) -> float:
        rows = self.rows if layer is None else self.for_layer(layer)
        vals = [abs(r.delta) for r in rows if r.delta is not None]
        return max(vals, default=0.0)

    def mean_abs_delta(self) -> float:
        vals = [abs(r.delta) for r in self.rows if r.delta is not None]
        return float(np.mean(vals)) if vals else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(TRACE_COLUMNS)
        for r in self.rows:
            wr.writerow([
                r.layer,
                r.head_index,
                "" if r.rate_present is None else repr(r.rate_present),
                "" if r.rate_absent is None else repr(r.rate_absent),
                r.tokens_present,
                r.tokens_absent,
            ])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "HeatmapTable":
        rd = csv.DictReader(io.StringIO(text))
        if tuple(rd.fieldnames or ()) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace CSV header {rd.fieldnames}")
        rows = []
        for rec in rd:
            rows.append(HeatmapRow(
                int(rec["layer"]),
                int(rec["head_index"]),
                float(rec["rate_present"]) if rec["rate_present"] else None,
                float(rec["rate_absent"]) if rec["rate_absent"] else None,
                int(rec["tokens_present"]),
                int(rec["tokens_absent"]),
            ))
        return cls(rows)


def trace_summary(traces: Sequence[ActivationTrace]) -> HeatmapTable:
    """Merge traces into per-layer, per-head activation rates split by label.

    Traces labelled ``"present"`` / ``"absent"`` feed the matching column; a
    split with no tokens is reported as missing rather than zero.
    """
    if not traces:
        raise ValueError("trace_summary needs at least one trace")
    acc: dict[tuple[int, str], list] = {}
    widths: dict[int, int] = {}
    for tr in traces:
        label = tr.label or "present"
        if label not in ("present", "absent"):
            raise ValueError(f"unknown trace label {tr.label!r}")
        key = (tr.layer, label)
        if key not in acc:
            acc[key] = [np.zeros_like(tr.active), 0]
        acc[key][0] = acc[key][0] + tr.active
        acc[key][1] += tr.total
        widths[tr.layer] = tr.active.shape[0]
    rows = []
    for layer in sorted(widths):
        pres = acc.get((layer, "present"), [np.zeros(widths[layer], np.int64), 0])
        absn = acc.get((layer, "absent"), [np.zeros(widths[layer], np.int64), 0])
        for j in range(widths[layer]):
            rows.append(HeatmapRow(
                layer,
                j,
                float(pres[0][j] / pres[1]) if pres[1] else None,
                float(absn[0][j] / absn[1]) if absn[1] else None,
                int(pres[1]),
                int(absn[1]),
            ))
    return HeatmapTable(rows)


def merge_traces(traces: Iterable[ActivationTrace]) -> list[ActivationTrace]:
    """Sum traces that share ``(layer, label)``; per-thread traces merge this way."""
    acc: dict[tuple[int, str | None], ActivationTrace] = {}
    for tr in traces:
        key = (tr.layer, tr.label)
        if key in acc:
            prev = acc[key]
            acc[key] = ActivationTrace(tr.layer, prev.active + tr.active, prev.total + tr.total, tr.label)
        else:
            acc[key] = ActivationTrace(tr.layer, tr.active.copy(), tr.total, tr.label)
    return list(acc.values())
