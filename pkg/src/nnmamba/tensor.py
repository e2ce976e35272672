"""Dense float tensors with define-by-run reverse-mode autodiff.

Every differentiable operation records a :class:`Node` on its output. Node ids
come from a global counter, so sorting reachable nodes by id in descending
order replays the tape backwards in a valid topological order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericError

_counter = itertools.count()
_grad_enabled = True
_strict = False


@contextlib.contextmanager
def no_grad():
    """Run the enclosed block without recording anything on the tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def set_strict(flag: bool) -> bool:
    """Turn non-finite operand checking on/off. Returns the previous value."""
    global _strict
    prev, _strict = _strict, bool(flag)
    return prev


@contextlib.contextmanager
def strict(flag: bool = True):
    prev = set_strict(flag)
    try:
        yield
    finally:
        set_strict(prev)


class Node:
    __slots__ = ("id", "parents", "backward")

    def __init__(self, parents: tuple, backward: Callable):
        self.id = next(_counter)
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    # ------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
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
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return cast(self, dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # ------------------------------------------------------------ operators
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    # ------------------------------------------------------------ methods
    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

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


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


# ---------------------------------------------------------------- recording


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._node = Node(tuple(parents), backward)
    return out


def _check_finite(*arrays):
    if _strict:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NumericError("non-finite operand in strict mode")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a} and {b} do not broadcast") from None


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a.shape, b.shape)
    _check_finite(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a.shape, b.shape)
    _check_finite(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a.shape, b.shape)
    _check_finite(a.data, b.data)
    x, y = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * y, x.shape) if a.requires_grad else None,
            _unbroadcast(g * x, y.shape) if b.requires_grad else None,
        )

    return _record(x * y, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a.shape, b.shape)
    _check_finite(a.data, b.data)
    x, y = a.data, b.data
    out = x / y

    def backward(g):
        return (
            _unbroadcast(g / y, x.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / y, y.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    p = float(exponent)
    return _record(x**p, (a,), lambda g: (g * p * x ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    _check_finite(a.data)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    _check_finite(a.data)
    x = a.data
    return _record(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    _check_finite(a.data)
    s = _sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1 - s),))


def softplus(a: Tensor) -> Tensor:
    _check_finite(a.data)
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype, copy=False)
    return _record(out, (a,), lambda g: (g * _sigmoid(x),))


def silu(a: Tensor) -> Tensor:
    _check_finite(a.data)
    x = a.data
    s = _sigmoid(x)
    return _record(x * s, (a,), lambda g: (g * (s * (1 + x * (1 - s))),))


def relu(a: Tensor) -> Tensor:
    _check_finite(a.data)
    x = a.data
    mask = x > 0
    return _record(np.where(mask, x, 0).astype(x.dtype, copy=False), (a,), lambda g: (g * mask,))


def cast(a: Tensor, dtype) -> Tensor:
    src = a.dtype
    return _record(a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands with >= 2 dims, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    _check_finite(a.data, b.data)
    x, y = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape) if b.requires_grad else None
        return ga, gb

    return _record(x @ y, (a, b), backward)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum(a, axes, keepdims) * (1.0 / count)


def logsumexp(a: Tensor, axis: int) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s
    return _record(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite(a.data)
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"bad permutation {axes} for {a.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    """Slicing (basic or advanced indexing); the ``slice`` primitive."""
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    try:
        out = a.data[index]
    except IndexError as e:
        raise DimensionError(str(e)) from None
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(np.array(out, copy=not basic) if basic else out, (a,), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    return getitem(a, tuple(index))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of nothing")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis):
            raise DimensionError(
                f"concat along axis {axis}: shapes {[t.shape for t in tensors]} disagree off-axis"
            )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def pad(a: Tensor, widths) -> Tensor:
    """Zero padding; ``widths`` is a sequence of ``(before, after)`` per axis."""
    widths = [tuple(w) for w in widths]
    if len(widths) != a.ndim:
        raise DimensionError(f"pad widths for {len(widths)} axes given to a {a.ndim}-d tensor")
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _record(np.pad(a.data, widths), (a,), lambda g: (g[index],))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    _broadcast_shape("broadcast", a.shape, shape)
    src = a.shape
    return _record(
        np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), lambda g: (_unbroadcast(g, src),)
    )


def flip(a: Tensor, axes) -> Tensor:
    return _record(np.flip(a.data, axes).copy(), (a,), lambda g: (np.flip(g, axes),))


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, inputs: Sequence[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The recorded nodes are released as they are consumed, so a graph can be
    differentiated once. Tensors listed in ``inputs`` that the loss does not
    depend on get a zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    order = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._node is None or id(t) in seen:
            continue
        seen.add(id(t))
        order.append(t)
        stack.extend(t._node.parents)
    order.sort(key=lambda t: t._node.id, reverse=True)

    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            _accumulate(loss, seed)
    grads = {id(loss): seed}
    for t in order:
        node = t._node
        t._node = None
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                _accumulate(parent, pg)
            else:
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    if inputs is not None:
        for p in inputs:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def _accumulate(leaf: Tensor, g: np.ndarray):
    g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
