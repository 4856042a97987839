"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation executed while a :class:`Tape` is active is
appended to that tape together with a closure mapping the output gradient to
the gradients of its parents. ``Tape.backward`` replays the records in
reverse creation order, which is a valid reverse topological order.

Broadcasting is limited to the "bias-add" pattern: in ``add``/``sub``/``mul``
one operand may have fewer elements than the other as long as it broadcasts
(numpy rules) into the other operand's exact shape.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "ShapeError",
    "NumericOverflowError",
    "ContractError",
    "current_tape",
    "record",
    "matmul",
    "add",
    "sub",
    "mul",
    "concat",
    "take",
    "reshape",
    "sigmoid",
    "tanh",
    "absolute",
    "tsum",
    "mean",
    "forward_op",
]


class TensorError(Exception):
    """Base class for tensor-core failures."""


class ShapeError(TensorError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericOverflowError(TensorError, FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite values in output")


class ContractError(TensorError):
    """A caller broke a precondition (non-scalar loss, missing gradient, ...)."""


_node_ids = itertools.count()
_local = threading.local()


class Tensor:
    """n-dimensional float64 array that can take part in a differentiation tape.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after
    ``Tape.backward``; intermediate results never store gradients.
    """

    __slots__ = ("values", "grad", "node_id", "requires_grad", "is_leaf", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @classmethod
    def _from_op(cls, values: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.values = values
        t.grad = None
        t.node_id = next(_node_ids)
        t.requires_grad = False
        t.is_leaf = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, values={self.values!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class _Record:
    __slots__ = ("out_id", "parents", "backward")

    def __init__(self, out_id, parents, backward):
        self.out_id = out_id
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered log of executed operations; one tape per forward/backward pass.

    Use as a context manager. Tapes nest per thread; the innermost active tape
    records.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of reachable leaves.

        Without ``wrt`` every reachable leaf is written. With ``wrt`` only the
        listed leaves are written, and those unreachable from ``loss`` get a
        zero gradient.
        """
        if loss.values.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
        leaves: dict[int, Tensor] = {}
        if loss.is_leaf and loss.requires_grad:
            leaves[loss.node_id] = loss
        for rec in reversed(self.records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            for parent, pg in zip(rec.parents, rec.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = parent.node_id
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
                if parent.is_leaf:
                    leaves[pid] = parent
        if wrt is not None:
            wrt = list(wrt)
            wanted = {p.node_id for p in wrt}
            leaves = {k: v for k, v in leaves.items() if k in wanted}
        for pid, leaf in leaves.items():
            g = grads[pid]
            if g.shape != leaf.values.shape:
                g = np.broadcast_to(g, leaf.values.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if wrt is not None:
            for p in wrt:
                if p.grad is None:
                    p.grad = np.zeros_like(p.values)


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def record(op: str, values: np.ndarray, parents: Sequence[Tensor],
           backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``values`` as the output of ``op`` and log it on the active tape.

    ``backward`` receives the output gradient and returns one gradient (or
    ``None``) per parent, each shaped like that parent.
    """
    if not np.all(np.isfinite(values)):
        raise NumericOverflowError(op)
    out = Tensor._from_op(values)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.records.append(_Record(out.node_id, tuple(parents), backward))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(op, sa, sb) from None
    if out != sa and out != sb:
        raise ShapeError(op, sa, sb, detail="only one operand may broadcast")
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.values + b.values, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.values - b.values, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shape("mul", a, b)
    av, bv = a.values, b.values

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return record("mul", av * bv, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Contract the last axis of ``a`` with the second-to-last of ``b``.

    Supported forms: ``(..., k) @ (k, n)`` (shared weights applied to every
    leading index) and ``(B, p, k) @ (B, k, n)`` (per-batch matrices).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if bv.ndim == 2 and av.ndim >= 1 and av.shape[-1] == bv.shape[0]:
        k, n = bv.shape

        def backward(g):
            ga = g @ bv.T
            gb = av.reshape(-1, k).T @ g.reshape(-1, n) if av.ndim > 1 else np.outer(av, g)
            return ga, gb

        return record("matmul", av @ bv, (a, b), backward)
    if (av.ndim == 3 and bv.ndim == 3 and av.shape[0] == bv.shape[0]
            and av.shape[2] == bv.shape[1]):

        def backward(g):
            return g @ bv.transpose(0, 2, 1), av.transpose(0, 2, 1) @ g

        return record("matmul", np.matmul(av, bv), (a, b), backward)
    raise ShapeError("matmul", a.shape, b.shape)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", detail="no inputs")
    nd = ts[0].ndim
    ax = axis % nd if nd else 0
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", ts[0].shape, t.shape)
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return [np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])]

    return record("concat", np.concatenate([t.values for t in ts], axis=ax), ts, backward)


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; no fancy indexing."""
    x = _as_tensor(x)
    idx = index if isinstance(index, tuple) else (index,)
    if any(not isinstance(i, (slice, int, type(Ellipsis))) for i in idx):
        raise ShapeError("slice", x.shape, detail=f"unsupported index {index!r}")
    try:
        out = x.values[idx]
    except IndexError as exc:
        raise ShapeError("slice", x.shape, detail=str(exc)) from None
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return record("slice", np.array(out, dtype=np.float64), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    orig = x.shape
    return record("reshape", out, (x,), lambda g: (g.reshape(orig),))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.values)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.values)
    return record("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def absolute(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    sign = np.sign(x.values)
    return record("abs", np.abs(x.values), (x,), lambda g: (g * sign,))


def tsum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    out = np.asarray(x.values.sum(axis=axis), dtype=np.float64)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", out, (x,), backward)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[a] for a in axes]))
    out = np.asarray(x.values.mean(axis=axis), dtype=np.float64)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return record("mean", out, (x,), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * v))


_KINDS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "concat-last-axis": lambda *ts: concat(ts, axis=-1),
    "slice": take,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "abs": absolute,
    "sum": tsum,
    "mean": mean,
    "reshape": reshape,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an operation by its kind name (``"matmul"``, ``"sigmoid"``, ...)."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise TensorError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)
