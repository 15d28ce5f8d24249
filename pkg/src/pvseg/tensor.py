"""Dense tensor engine with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous float32/float64 numpy array. Operations
executed while a :class:`Tape` is active are recorded in execution order
(which is already a topological order), and :func:`backward` replays the tape
in reverse to accumulate gradients into ``.grad`` buffers.

Tensors are immutable after construction except for their ``grad`` buffer;
a tape and the tensors recorded on it belong to a single training step on a
single thread.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

SUPPORTED_DTYPES = (np.float32, np.float64)


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self) -> None:
        # each node: (output Tensor, tuple of input Tensors, backward closure)
        self.nodes: list[tuple["Tensor", tuple["Tensor", ...], Callable[[np.ndarray], None]]] = []

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...],
               backward_fn: Callable[[np.ndarray], None]) -> None:
        self.nodes.append((out, inputs, backward_fn))

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE_TAPES: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tensor:
    """Dense n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            if np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.integer) \
                    or arr.dtype == np.bool_:
                arr = arr.astype(np.float32)
            else:
                raise ValueError(f"unsupported dtype {arr.dtype}; expected f32 or f64")
        # ascontiguousarray would promote 0-d arrays to shape (1,); keep
        # scalars 0-d so reductions over the last axis stay consistent.
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        """A view of the same data outside the differentiation record."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar (definitions live below as module functions) --------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _result_dtype(*tensors: Tensor):
    dt = np.float32
    for t in tensors:
        if t.data.dtype == np.float64:
            dt = np.float64
    return dt


def _make_out(data: np.ndarray, inputs: tuple[Tensor, ...],
              backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result; record it on the active tape when gradients are needed."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make_out(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make_out(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make_out(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make_out(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return _make_out(-a.data, (a,), bwd)


# -- unary nonlinearities ------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out)

    return _make_out(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g / a.data)

    return _make_out(np.log(a.data), (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * (0.5 / out))

    return _make_out(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum (not where) so NaN propagates instead of silently becoming 0
    out = np.maximum(a.data, 0)

    def bwd(g):
        _accum(a, g * mask)

    return _make_out(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # stable logistic: exp of a non-positive argument on either branch
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _make_out(out, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = a.data
    out = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype)

    def bwd(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        _accum(a, g * s.astype(x.dtype))

    return _make_out(out, (a,), bwd)


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a exceeds the floor."""
    mask = a.data > floor
    # np.maximum (not where) so NaN propagates instead of silently becoming
    # the floor value.
    out = np.maximum(a.data, np.asarray(floor, dtype=a.data.dtype))

    def bwd(g):
        _accum(a, g * mask)

    return _make_out(out, (a,), bwd)


# -- reductions ---------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).astype(a.data.dtype))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).astype(a.data.dtype))

    return _make_out(out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else _axis_count(a.shape, axis)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / count, a.shape).astype(a.data.dtype))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / count, a.shape).astype(a.data.dtype))

    return _make_out(out, (a,), bwd)


def _axis_count(shape: tuple[int, ...], axis) -> int:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = 1
    for ax in axes:
        n *= shape[ax]
    return n


# -- shape manipulation ---------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _make_out(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = a.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv) if inv is not None else g.transpose())

    return _make_out(out, (a,), bwd)


def getitem(a: Tensor, index) -> Tensor:
    """Basic indexing (ints and slices); gradient scatters back into place."""
    out = a.data[index]

    def bwd(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[index] += g

    return _make_out(np.array(out, copy=True), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            sl[axis] = slice(start, stop)
            _accum(t, g[tuple(sl)])

    return _make_out(out, tuple(tensors), bwd)


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    # promote 1-D operands to matrices so one gradient rule covers all cases
    a_vec = a.data.ndim == 1
    b_vec = b.data.ndim == 1
    A = a.data[None, :] if a_vec else a.data
    B = b.data[:, None] if b_vec else b.data
    out = np.matmul(A, B)
    if a_vec:
        out = out[..., 0, :]
    if b_vec:
        out = out[..., 0]

    def bwd(g):
        G = g
        if b_vec:
            G = G[..., None]
        if a_vec:
            G = G[..., None, :]
        if a.requires_grad:
            ga = np.matmul(G, np.swapaxes(B, -1, -2))
            if a_vec:
                ga = ga.reshape(-1, a.shape[0]) if ga.ndim > 2 else ga
                ga = ga.sum(axis=tuple(range(ga.ndim - 1))) if ga.ndim > 1 else ga
            _accum(a, _unbroadcast(ga, a.shape) if not a_vec else ga)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(A, -1, -2), G)
            if b_vec:
                gb = gb.reshape(-1, b.shape[0]) if gb.ndim > 2 else gb[..., 0]
                if gb.ndim > 1:
                    gb = gb.sum(axis=tuple(range(gb.ndim - 1)))
            _accum(b, _unbroadcast(gb, b.shape) if not b_vec else gb)

    return _make_out(out, (a, b), bwd)


# -- graph replay ----------------------------------------------------------------

def backward(loss: Tensor, tape: Tape, params: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` for every recorded tensor.

    ``loss`` must be a scalar. When ``params`` is given, any of those tensors
    left untouched by the replay (parameters the loss does not depend on)
    receive an all-zero gradient buffer.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("backward called on a non-finite loss")
    loss.grad = np.ones_like(loss.data)
    for out, _inputs, bwd_fn in reversed(tape.nodes):
        if out.grad is None:
            continue
        bwd_fn(out.grad)
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
