"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. While a :class:`Tape` is active,
every primitive records the applied operation together with a
vector-Jacobian closure; :meth:`Tape.backward` replays the record in
reverse creation order (which is topological) and accumulates adjoints,
visiting each node exactly once.

Every primitive verifies its output is finite and raises
:class:`~sinkgraph.errors.NonFiniteValue` otherwise. Reduction order is
fixed, so identical inputs produce bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from sinkgraph import kernels
from sinkgraph.errors import (
    DetachedTensor,
    IndexOutOfRange,
    NonFiniteValue,
    NotScalar,
    ShapeMismatch,
)

_TAPE_STACK: list["Tape"] = []


def _current_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Row-major float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "parents", "vjp", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim >= 1 and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable[[np.ndarray], tuple] | None = None
        self.op: str = "leaf" if requires_grad else "const"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce_mean(self, axis, keepdims)


def tensor(data) -> Tensor:
    """Constant tensor (not differentiated through)."""
    return data if isinstance(data, Tensor) else Tensor(data)


def parameter(data) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True)


class Tape:
    """Ordered record of primitive applications; context manager."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Adjoints of ``loss`` with respect to every reachable leaf.

        Returns a map keyed by leaf Tensor identity. Shared subexpressions
        accumulate (sum) their adjoints.
        """
        if loss.data.size != 1:
            raise NotScalar(f"loss has shape {loss.data.shape}")
        recorded = {id(n) for n in self.nodes}
        if id(loss) not in recorded:
            raise DetachedTensor("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[Tensor, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if parent.vjp is not None and id(parent) in recorded:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                elif parent.requires_grad:
                    if parent in leaf_grads:
                        leaf_grads[parent] = leaf_grads[parent] + pg
                    else:
                        leaf_grads[parent] = pg
        return leaf_grads


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finalize(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteValue(f"primitive '{op}' produced non-finite values")
    out = Tensor(out_data)
    out.op = op
    tape = _current_tape()
    if tape is not None and any(t.requires_grad or t.vjp is not None for t in inputs):
        out.parents = tuple(inputs)
        out.vjp = vjp
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum an upstream gradient down to the pre-broadcast shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise arithmetic --------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeMismatch(str(e)) from e
    return _finalize(
        "add", out, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeMismatch(str(e)) from e
    return _finalize(
        "sub", out, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeMismatch(str(e)) from e
    ad, bd = a.data, b.data
    return _finalize(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = a.data / b.data
    except ValueError as e:
        raise ShapeMismatch(str(e)) from e
    ad, bd = a.data, b.data
    return _finalize(
        "div", out, (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _finalize("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _finalize("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    ad = a.data
    return _finalize("log", out, (a,), lambda g: (g / ad,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    # subgradient 1 at the kink
    mask = a.data >= 0.0
    return _finalize("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp(a, min_value: float | None = None, max_value: float | None = None) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.data, min_value, max_value)
    mask = np.ones(a.data.shape, dtype=bool)
    if min_value is not None:
        mask &= a.data >= min_value
    if max_value is not None:
        mask &= a.data <= max_value
    return _finalize("clamp", out, (a,), lambda g: (g * mask,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data
    return _finalize("matmul", out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# --- reductions ---------------------------------------------------------

def _reduce_sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _finalize("sum", np.asarray(out, dtype=np.float64), (a,), vjp)


def _reduce_mean(a: Tensor, axis, keepdims: bool) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, shape).copy(),)

    return _finalize("mean", np.asarray(out, dtype=np.float64), (a,), vjp)


def max_reduce(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum over an axis; ties route the adjoint to the first index."""
    a = _as_tensor(a)
    data = a.data
    if axis is None:
        out = np.asarray(data.max(), dtype=np.float64)
        flat_arg = int(np.argmax(data))

        def vjp(g):
            gx = np.zeros_like(data)
            gx.flat[flat_arg] = g
            return (gx,)

    else:
        out = data.max(axis=axis, keepdims=keepdims)
        arg = np.expand_dims(np.argmax(data, axis=axis), axis)

        def vjp(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            gx = np.zeros_like(data)
            np.put_along_axis(gx, arg, gg, axis)
            return (gx,)

    return _finalize("max-reduce", out, (a,), vjp)


def softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"softmax-rows expects 2-D, got {a.data.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - dot) * out,)

    return _finalize("softmax-rows", out, (a,), vjp)


# --- structure ops ------------------------------------------------------

def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from e
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _finalize("concat", out, ts, vjp)


def _rows_view(data: np.ndarray) -> tuple[np.ndarray, bool]:
    if data.ndim == 1:
        return data.reshape(-1, 1), True
    if data.ndim == 2:
        return data, False
    raise ShapeMismatch(f"expected 1-D or 2-D array, got {data.shape}")


def gather_rows(a, index) -> Tensor:
    a = _as_tensor(a)
    idx = np.ascontiguousarray(np.asarray(index, dtype=np.int64))
    if idx.ndim != 1:
        raise ShapeMismatch("gather-rows index must be 1-D")
    rows, was_1d = _rows_view(a.data)
    n = rows.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexOutOfRange("gather-rows index out of range")
    out2 = kernels.gather_rows(rows, idx)
    out = out2[:, 0] if was_1d else out2

    def vjp(g):
        g2 = g.reshape(-1, 1) if was_1d else np.ascontiguousarray(g)
        ga = kernels.scatter_add_rows(g2, idx, n)
        return (ga[:, 0] if was_1d else ga,)

    return _finalize("gather-rows", out, (a,), vjp)


def segment_sum(a, segments, num_segments: int) -> Tensor:
    a = _as_tensor(a)
    seg = np.ascontiguousarray(np.asarray(segments, dtype=np.int64))
    rows, was_1d = _rows_view(a.data)
    if seg.shape[0] != rows.shape[0]:
        raise ShapeMismatch("segment ids must match leading dimension")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise IndexOutOfRange("segment id out of range")
    out2 = kernels.segment_sum(rows, seg, num_segments)
    out = out2[:, 0] if was_1d else out2

    def vjp(g):
        g2 = g.reshape(-1, 1) if was_1d else np.ascontiguousarray(g)
        ga = kernels.gather_rows(g2, seg)
        return (ga[:, 0] if was_1d else ga,)

    return _finalize("segment-sum", out, (a,), vjp)


def segment_max(a, segments, num_segments: int, empty_value: float = 0.0) -> Tensor:
    """Per-segment maximum; empty segments yield ``empty_value`` and no adjoint.

    Ties route the adjoint to the first attaining input row.
    """
    a = _as_tensor(a)
    seg = np.ascontiguousarray(np.asarray(segments, dtype=np.int64))
    rows, was_1d = _rows_view(a.data)
    if seg.shape[0] != rows.shape[0]:
        raise ShapeMismatch("segment ids must match leading dimension")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise IndexOutOfRange("segment id out of range")
    out2, arg = kernels.segment_max(rows, seg, num_segments, empty_value)
    out = out2[:, 0] if was_1d else out2
    n = rows.shape[0]

    def vjp(g):
        g2 = g.reshape(-1, 1) if was_1d else np.ascontiguousarray(g)
        ga = kernels.scatter_rows_at(g2, arg, n)
        return (ga[:, 0] if was_1d else ga,)

    return _finalize("segment-max", out, (a,), vjp)


def broadcast_row(v, num_rows: int) -> Tensor:
    """Replicate a length-m vector as each of ``num_rows`` rows."""
    v = _as_tensor(v)
    if v.data.ndim != 1:
        raise ShapeMismatch("broadcast-row expects a 1-D vector")
    out = np.broadcast_to(v.data, (num_rows, v.data.shape[0])).copy()
    return _finalize("broadcast-row", out, (v,), lambda g: (g.sum(axis=0),))


def broadcast_col(v, num_cols: int) -> Tensor:
    """Replicate a length-k vector as each of ``num_cols`` columns."""
    v = _as_tensor(v)
    if v.data.ndim != 1:
        raise ShapeMismatch("broadcast-col expects a 1-D vector")
    out = np.broadcast_to(v.data[:, None], (v.data.shape[0], num_cols)).copy()
    return _finalize("broadcast-col", out, (v,), lambda g: (g.sum(axis=1),))


# --- generic dispatch ---------------------------------------------------

_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "neg": neg,
    "relu": relu,
    "sum": lambda a, **kw: _as_tensor(a).sum(**kw),
    "mean": lambda a, **kw: _as_tensor(a).mean(**kw),
    "max-reduce": max_reduce,
    "softmax-rows": softmax_rows,
    "concat": lambda *ts, **kw: concat(ts, **kw),
    "gather-rows": gather_rows,
    "segment-sum": segment_sum,
    "segment-max": segment_max,
    "broadcast-row": broadcast_row,
    "broadcast-col": broadcast_col,
    "clamp": clamp,
}


def apply_primitive(op: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Apply a named primitive to ``inputs`` with keyword ``attrs``."""
    if op not in _PRIMITIVES:
        raise ValueError(f"unknown primitive kind: {op!r}")
    return _PRIMITIVES[op](*inputs, **(attrs or {}))


# --- gradient checking --------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    rel_err: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    passed: bool


def grad_check(f, x, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the tape gradient of scalar-valued ``f`` at ``x`` against
    central finite differences.

    Per coordinate the reported error is
    ``|analytic - fd| / max(1, |fd|)``; the check passes iff the maximum
    is at most ``tol``.
    """
    x0 = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    p = parameter(x0.copy())
    with Tape() as t:
        y = f(p)
    if y.data.size != 1:
        raise NotScalar("grad_check requires a scalar-valued function")
    analytic = t.backward(y).get(p, np.zeros_like(x0))

    numeric = np.zeros_like(x0)
    flat = numeric.ravel()
    for i in range(x0.size):
        xp = x0.copy()
        xp.flat[i] += h
        fp = float(f(Tensor(xp)).data)
        xm = x0.copy()
        xm.flat[i] -= h
        fm = float(f(Tensor(xm)).data)
        flat[i] = (fp - fm) / (2.0 * h)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    max_err = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_err, rel, analytic, numeric, max_err <= tol)
