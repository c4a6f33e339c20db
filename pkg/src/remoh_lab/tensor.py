"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every primitive is a (forward, backward) pair in ``_OPS``.  Applying a
primitive to operands that require gradients links the result to its
parents; :meth:`ComputationRecord.from_output` linearises that graph into a
topologically ordered list of steps which can be replayed or differentiated.

Broadcasting is deliberately limited: elementwise binary ops need equal
shapes, except ``add`` with a 1-D right operand (row bias) and ``add_const``
with a non-differentiable mask.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import DimensionError, NumericError, StructuralError

_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without building a graph."""
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def probe_relu():
    """Collect the input of every ``relu`` evaluated inside the block."""
    prev = getattr(_state, "probe", None)
    seen: list[np.ndarray] = []
    _state.probe = seen
    try:
        yield seen
    finally:
        _state.probe = prev


class Tensor:
    """Row-major float64 array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "id", "op", "parents", "attrs", "saved", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.op = None
        self.parents: tuple[Tensor, ...] = ()
        self.attrs: dict = {}
        self.saved = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.id = next(_ids)
        t.op = None
        t.parents = ()
        t.attrs = {}
        t.saved = None
        t.name = None
        return t

    # -- array-ish surface -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{rg})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        if isinstance(other, (int, float)) and other == 0:
            return self
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor division is only defined for scalar divisors")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, seed=None) -> dict:
        return backward(ComputationRecord.from_output(self), seed)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if like is not None and arr.ndim == 0:
        arr = np.full(like.shape, float(arr))
    return Tensor(arr)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# primitive registry

_OPS: dict[str, tuple[Callable, Callable]] = {}


def _register(name: str, fwd: Callable, bwd: Callable) -> None:
    _OPS[name] = (fwd, bwd)


def _apply(name: str, parents: Sequence[Tensor], **attrs) -> Tensor:
    fwd = _OPS[name][0]
    probe = getattr(_state, "probe", None)
    if probe is not None and name == "relu":
        probe.append(parents[0].data)
    out, saved = fwd(*[p.data for p in parents], **attrs)
    t = Tensor._wrap(out)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.op = name
        t.parents = tuple(parents)
        t.attrs = attrs
        t.saved = saved
    return t


def _shape_err(op: str, a, b) -> DimensionError:
    return DimensionError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


# -- add / sub / mul / scale --------------------------------------------------

def _f_add(a, b):
    if a.shape == b.shape:
        return a + b, None
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return a + b, None
    raise _shape_err("add", a.shape, b.shape)


def _b_add(g, out, saved, pa, pb):
    if pa.shape == pb.shape:
        return g, g
    return g, g.reshape(-1, pb.shape[0]).sum(axis=0)


_register("add", _f_add, _b_add)


def _f_sub(a, b):
    if a.shape != b.shape:
        raise _shape_err("sub", a.shape, b.shape)
    return a - b, None


_register("sub", _f_sub, lambda g, out, saved, pa, pb: (g, -g))


def _f_mul(a, b):
    if a.shape != b.shape:
        raise _shape_err("mul", a.shape, b.shape)
    return a * b, None


_register("mul", _f_mul, lambda g, out, saved, pa, pb: (g * pb, g * pa))
_register("scale", lambda a, c: (a * c, None), lambda g, out, saved, pa, c: (g * c,))


def _f_add_const(a, c):
    if np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise _shape_err("add_const", a.shape, c.shape)
    return a + c, None


_register("add_const", _f_add_const, lambda g, out, saved, pa, c: (g,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1-D row bias matching ``a``'s last axis."""
    return _apply("add", (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _apply("sub", (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _apply("mul", (a, b))


def scale(a: Tensor, c: float) -> Tensor:
    return _apply("scale", (a,), c=float(c))


def add_const(a: Tensor, c) -> Tensor:
    """``a + c`` where ``c`` is a constant array broadcastable to ``a`` (masks)."""
    return _apply("add_const", (a,), c=np.asarray(c, dtype=np.float64))


# -- matmul -------------------------------------------------------------------

def _f_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_err("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise _shape_err("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.ndim != b.ndim:
        raise _shape_err("matmul", a.shape, b.shape)
    return a @ b, None


def _b_matmul(g, out, saved, pa, pb):
    ga = g @ np.swapaxes(pb, -1, -2)
    if pb.ndim == 2:
        q = pa.shape[-1]
        gb = pa.reshape(-1, q).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.swapaxes(pa, -1, -2) @ g
    return ga, gb


_register("matmul", _f_matmul, _b_matmul)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``c[i,j] = sum_k a[i,k] b[k,j]``.

    Leading axes of ``a`` are treated as a stack of row blocks when ``b`` is a
    plain matrix; otherwise both operands need identical leading axes.
    """
    return _apply("matmul", (a, b))


# -- shape ops ----------------------------------------------------------------

def _f_transpose(a, axes):
    if axes is None:
        return np.swapaxes(a, -1, -2), None
    return np.transpose(a, axes), None


def _b_transpose(g, out, saved, pa, axes):
    if axes is None:
        return (np.swapaxes(g, -1, -2),)
    return (np.transpose(g, np.argsort(axes)),)


_register("transpose", _f_transpose, _b_transpose)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    return _apply("transpose", (a,), axes=None if axes is None else tuple(axes))


def _f_reshape(a, shape):
    try:
        return a.reshape(shape), None
    except ValueError as exc:
        raise _shape_err("reshape", a.shape, shape) from exc


_register("reshape", _f_reshape, lambda g, out, saved, pa, shape: (g.reshape(pa.shape),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _apply("reshape", (a,), shape=tuple(shape))


def _f_concat(*arrays, axis):
    try:
        return np.concatenate(arrays, axis=axis), None
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[a.shape for a in arrays]}") from exc


def _b_concat(g, out, saved, *parents, axis):
    cuts = np.cumsum([p.shape[axis] for p in parents])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


_register("concat", _f_concat, _b_concat)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return _apply("concat", tuple(tensors), axis=axis)


def _f_take(a, index, axis):
    return np.take(a, index, axis=axis), None


def _b_take(g, out, saved, pa, index, axis):
    ga = np.zeros_like(pa)
    moved = np.moveaxis(ga, axis, 0)
    np.add.at(moved, index, np.moveaxis(g, axis, 0))
    return (ga,)


_register("take", _f_take, _b_take)


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (embedding lookup when ``axis=0``)."""
    return _apply("take", (a,), index=np.asarray(index, dtype=np.int64), axis=axis)


# -- reductions ---------------------------------------------------------------

def _f_sum(a, axis, keepdims):
    return np.asarray(a.sum(axis=axis, keepdims=keepdims)), None


def _b_sum(g, out, saved, pa, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, pa.shape).copy(),)


_register("sum", _f_sum, _b_sum)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _apply("sum", (a,), axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- elementwise nonlinearities ----------------------------------------------

def _f_relu(a):
    return np.maximum(a, 0.0), None


# gradient at exactly 0 is 0
_register("relu", _f_relu, lambda g, out, saved, pa: (g * (pa > 0.0),))
_register("exp", lambda a: (np.exp(a), None), lambda g, out, saved, pa: (g * out,))
_register(
    "clip_max",
    lambda a, hi: (np.minimum(a, hi), None),
    lambda g, out, saved, pa, hi: (g * (pa < hi),),
)


def relu(a: Tensor) -> Tensor:
    """Elementwise ``max(0, a)``; the derivative at 0 is taken as 0."""
    return _apply("relu", (a,))


def exp(a: Tensor) -> Tensor:
    return _apply("exp", (a,))


def clip_max(a: Tensor, hi: float) -> Tensor:
    """Elementwise ``min(a, hi)``."""
    return _apply("clip_max", (a,), hi=float(hi))


def _f_scale_rows(x, s):
    if x.shape[:-1] != s.shape:
        raise _shape_err("scale_rows", x.shape, s.shape)
    return x * s[..., None], None


def _b_scale_rows(g, out, saved, px, ps):
    return g * ps[..., None], (g * px).sum(axis=-1)


_register("scale_rows", _f_scale_rows, _b_scale_rows)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every row ``x[..., :]`` by the scalar ``s[...]``."""
    return _apply("scale_rows", (x, s))


def _f_rms_norm(a, eps):
    r = np.sqrt((a * a).mean(axis=-1, keepdims=True) + eps)
    y = a / r
    return y, r


def _b_rms_norm(g, out, saved, pa, eps):
    return ((g - out * (g * out).mean(axis=-1, keepdims=True)) / saved,)


_register("rms_norm", _f_rms_norm, _b_rms_norm)


def rms_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x^2) + eps)`` over the last axis, no gain."""
    return _apply("rms_norm", (x,), eps=float(eps))


# -- softmax / cross-entropy --------------------------------------------------

def _f_softmax(a):
    if a.ndim == 0 or a.shape[-1] < 1:
        raise DimensionError(f"softmax_rows: need a last axis of width >= 1, got {a.shape}")
    if not np.isfinite(a).all():
        raise NumericError("softmax_rows: non-finite input")
    flat = np.ascontiguousarray(a.reshape(-1, a.shape[-1]))
    return _kernels.softmax_rows(flat).reshape(a.shape), None


def _b_softmax(g, out, saved, pa):
    d = out.shape[-1]
    y = np.ascontiguousarray(out.reshape(-1, d))
    gg = np.ascontiguousarray(g.reshape(-1, d))
    return (_kernels.softmax_rows_grad(y, gg).reshape(out.shape),)


_register("softmax", _f_softmax, _b_softmax)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    return _apply("softmax", (x,))


def _f_cross_entropy(logits, targets):
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be T x V, got {logits.shape}")
    if targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: {targets.shape[0]} targets for {logits.shape[0]} positions")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise IndexError(f"cross_entropy: target index out of range for V={logits.shape[1]}")
    if not np.isfinite(logits).all():
        raise NumericError("cross_entropy: non-finite logits")
    loss, probs = _kernels.cross_entropy(np.ascontiguousarray(logits), targets)
    return np.asarray(loss), probs


def _b_cross_entropy(g, out, saved, pl, targets):
    return (float(g) * _kernels.cross_entropy_grad(saved, targets),)


_register("cross_entropy", _f_cross_entropy, _b_cross_entropy)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-softmax of ``logits``."""
    return _apply("cross_entropy", (logits,), targets=np.asarray(targets, dtype=np.int64))


# ---------------------------------------------------------------------------
# records, replay, backward

@dataclass
class Step:
    op: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict = field(default_factory=dict)
    saved: Any = None


@dataclass
class ComputationRecord:
    """Topologically ordered primitive applications ending at ``output_id``."""

    steps: list[Step]
    tensors: dict[int, Tensor]
    output_id: int

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationRecord":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in reversed(node.parents):
                if p.id not in seen:
                    stack.append((p, False))
        tensors = {t.id: t for t in order}
        steps = [
            Step(t.op, tuple(p.id for p in t.parents), t.id, t.attrs, t.saved)
            for t in order
            if t.op is not None
        ]
        return cls(steps, tensors, out.id)

    @property
    def leaves(self) -> list[Tensor]:
        produced = {s.output for s in self.steps}
        return [t for i, t in self.tensors.items() if i not in produced]

    def validate(self) -> None:
        produced_by = {}
        for pos, s in enumerate(self.steps):
            if s.output in produced_by:
                raise StructuralError(f"tensor {s.output} produced twice")
            produced_by[s.output] = pos
        for pos, s in enumerate(self.steps):
            for i in s.inputs:
                if i not in self.tensors:
                    raise StructuralError(f"step {pos} reads unknown tensor {i}")
                if i in produced_by and produced_by[i] >= pos:
                    raise StructuralError(
                        f"step {pos} ({s.op}) consumes tensor {i} before it is produced: cycle or misordering"
                    )

    def replay(self, overrides: dict[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Recompute every step from leaf values; returns ``{tensor id: value}``."""
        self.validate()
        values = {t.id: t.data for t in self.leaves}
        if overrides:
            values.update(overrides)
        for s in self.steps:
            fwd = _OPS[s.op][0]
            out, _ = fwd(*[values[i] for i in s.inputs], **s.attrs)
            values[s.output] = np.asarray(out)
        return values


def backward(record: ComputationRecord, seed=None) -> dict[Tensor, np.ndarray]:
    """Accumulate gradients of the record's output into every leaf that requires them.

    Returns a map from each differentiable leaf to the gradient contributed by
    this pass; the same amount is added to ``leaf.grad``.
    """
    record.validate()
    out = record.tensors[record.output_id]
    if seed is None:
        if out.size != 1:
            raise DimensionError(f"backward: implicit seed needs a scalar output, got {out.shape}")
        seed = np.ones(out.shape)
    else:
        seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
        if seed.shape != out.shape:
            seed = np.broadcast_to(seed, out.shape).copy()
    grads: dict[int, np.ndarray] = {out.id: seed}
    for s in reversed(record.steps):
        g = grads.pop(s.output, None)
        if g is None:
            continue
        node = record.tensors[s.output]
        parents = [record.tensors[i] for i in s.inputs]
        bwd = _OPS[s.op][1]
        gins = bwd(g, node.data, s.saved, *[p.data for p in parents], **s.attrs)
        for p, gi in zip(parents, gins):
            if gi is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + gi
            else:
                grads[p.id] = gi
    result = {}
    for leaf in record.leaves:
        if not leaf.requires_grad:
            continue
        g = grads.get(leaf.id)
        if g is None:
            g = np.zeros(leaf.shape)
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result


def parameters_grad(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
