"""Dense tensors with a recording tape for reverse-mode differentiation.

Every differentiable op appends one record ``(output, inputs, backward_fn)`` to
the tape that is current on the calling thread.  :func:`backward` walks that
tape in strict reverse execution order, so a tensor's gradient is complete
before the op that produced it is visited.

Implicit broadcasting in binary ops is restricted to *leading* axes: after
dropping leading size-1 axes, the smaller operand's shape must be a suffix of
the larger one (``(3,) + (4, 3)`` and ``(1, 3) + (4, 3)`` work, ``(4, 1) + (4, 3)``
does not).  Anything else goes through :func:`broadcast_to` explicitly.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
_FLOAT_DTYPES = (np.dtype(np.float64), np.dtype(np.float32))


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class DomainError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class ContractError(AutodiffError, RuntimeError):
    pass


class Tape:
    """Ordered list of op records for one forward pass.

    Usable as a context manager to make it the current tape of this thread::

        with Tape() as tape:
            loss = model(batch)
            backward(loss)
    """

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def reset(self) -> None:
        self.records.clear()
        self.consumed = False

    def __enter__(self) -> "Tape":
        _local().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local().stack.pop()


_thread_state = threading.local()


def _local():
    st = _thread_state
    if not hasattr(st, "stack"):
        st.stack = [Tape()]
        st.grad_enabled = True
    return st


def current_tape() -> Tape:
    st = _local()
    tape = st.stack[-1]
    if tape.consumed:
        # a consumed tape is never appended to; old losses keep pointing at it
        tape = Tape()
        st.stack[-1] = tape
    return tape


def is_grad_enabled() -> bool:
    return _local().grad_enabled


@contextmanager
def no_grad():
    st = _local()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def _to_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.array(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
        return data.copy()
    if isinstance(data, (np.floating,)) and np.dtype(type(data)) in _FLOAT_DTYPES:
        return np.array(data)
    return np.array(data, dtype=DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_retain", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _to_array(data, dtype)
        if self.data.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {self.data.dtype}; use float64 or float32")
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._tape: Tape | None = None
        self._retain = False
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        t._retain = False
        t.name = None
        return t

    # -- introspection -----------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def __repr__(self) -> str:
        extra = ", requires_grad=True" if self.requires_grad else ""
        if self.name:
            extra += f", name={self.name!r}"
        return f"Tensor(shape={self.shape}{extra})"

    def __len__(self) -> int:
        return self.shape[0]

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep this (non-leaf) tensor's gradient in ``.grad`` during backward."""
        self._retain = True
        return self

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        self.requires_grad = flag
        if flag and self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def backward(self) -> None:
        backward(self)

    # -- operators -----------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(_to_array(x, dtype))


def _lift(a, b) -> tuple[Tensor, Tensor]:
    """Promote Python scalars/arrays to constant tensors matching the other operand."""
    if not isinstance(a, Tensor):
        a = Tensor._wrap(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor._wrap(np.asarray(b, dtype=a.dtype))
    return a, b


def record_op(name: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out`` as a tensor and put it on the tape if any input needs grads.

    ``backward_fn(g)`` must return one gradient (or None) per input, each shaped
    like that input.  Layers that define their own primitives go through here.
    """
    if not np.isfinite(out).all():
        if all(np.isfinite(t.data).all() for t in inputs):
            raise NonFiniteError(f"{name}: non-finite values produced from finite inputs")
    t = Tensor._wrap(out)
    if is_grad_enabled() and any(x.requires_grad for x in inputs):
        tape = current_tape()
        t.requires_grad = True
        t._tape = tape
        tape.records.append((t, tuple(inputs), backward_fn))
    return t


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every grad-requiring leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss does not depend on any recorded op (tape is empty)")
    if tape.consumed:
        raise ContractError("tape already consumed by backward(); run a fresh forward pass")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.records):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        if out._retain:
            out.grad = g
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"backward produced grad of shape {gi.shape} for input {t.shape}")
            if t._tape is None:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi
            else:
                key = id(t)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
    tape.consumed = True
    tape.records.clear()


# -- broadcasting helpers ----------------------------------------------------

def _strip(shape):
    i = 0
    while i < len(shape) and shape[i] == 1:
        i += 1
    return shape[i:]


def _leading_broadcast(sa, sb) -> tuple[int, ...]:
    if sa == sb:
        return sa
    for small, large in ((sa, sb), (sb, sa)):
        core = _strip(small)
        if len(small) <= len(large) and large[len(large) - len(core):] == core:
            return large
    raise ShapeError(f"shapes {sa} and {sb} do not broadcast over leading axes")


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``g`` back to ``shape`` under numpy broadcasting rules."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (n, m) in enumerate(zip(shape, g.shape)) if n == 1 and m != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _leading_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record_op("add", a.data + b.data, (a, b),
                     lambda g: (_sum_to(g, sa), _sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _leading_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record_op("sub", a.data - b.data, (a, b),
                     lambda g: (_sum_to(g, sa), _sum_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _leading_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return record_op("mul", ad * bd, (a, b),
                     lambda g: (_sum_to(g * bd, sa), _sum_to(g * ad, sb)))


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    _leading_broadcast(a.shape, b.shape)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return record_op("div", ad / bd, (a, b),
                     lambda g: (_sum_to(g / bd, sa), _sum_to(-g * ad / (bd * bd), sb)))


def neg(a: Tensor) -> Tensor:
    return record_op("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    if not p.is_integer() and np.any(ad < 0):
        raise DomainError(f"non-integer power {p} of a negative value")
    if p < 0 and np.any(ad == 0):
        raise DomainError(f"negative power {p} of zero")
    return record_op("power", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


# -- elementwise unary -------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record_op("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise DomainError("log of a non-positive value")
    return record_op("log", np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record_op("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return record_op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record_op("relu", a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return record_op("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics, including broadcasting of batch dimensions."""
    a, b = _lift(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul does not accept scalars; use mul")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def fn(g):
        A = ad[None, :] if ad.ndim == 1 else ad
        B = bd[:, None] if bd.ndim == 1 else bd
        G = g
        if ad.ndim == 1:
            G = np.expand_dims(G, -2)
        if bd.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = _sum_to(np.matmul(G, np.swapaxes(B, -1, -2)), A.shape).reshape(ad.shape)
        gb = _sum_to(np.matmul(np.swapaxes(A, -1, -2), G), B.shape).reshape(bd.shape)
        return ga, gb

    return record_op("matmul", out, (a, b), fn)


# -- shape ops ---------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return record_op("sum", np.asarray(out), (a,),
                     lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),))


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean over empty axes of shape {a.shape}")
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return record_op("mean", np.asarray(out), (a,),
                     lambda g: (np.broadcast_to(g.reshape(kept) / count, shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    src = a.shape
    return record_op("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return record_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    out = np.array(a.data[idx])
    shape, dt = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def fn(g):
        full = np.zeros(shape, dtype=dt)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record_op("getitem", out, (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
                n != m for i, (n, m) in enumerate(zip(t.shape, ref.shape)) if i != axis):
            raise ShapeError(f"concat shapes {ref.shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record_op("concat", out, tuple(tensors),
                     lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack of an empty list")
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack shapes {tensors[0].shape} and {t.shape} differ")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    n = len(tensors)
    return record_op("stack", out, tuple(tensors),
                     lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the one place general broadcasting is allowed."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc
    src = a.shape
    return record_op("broadcast_to", out, (a,), lambda g: (_sum_to(g, src),))


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

