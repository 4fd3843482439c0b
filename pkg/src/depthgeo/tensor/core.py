"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every value is a :class:`Tensor` wrapping a C-contiguous float64 ndarray.
Operations build a tape of closures; ``Tensor.backward()`` walks it in
reverse topological order. Broadcasting follows numpy semantics, with
gradients summed back to the parent shape.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import scipy.special


class Tensor:
    """A float64 array node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None,
                 name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- autodiff ------------------------------------------------------------

    def backward(self, grad=None):
        """Backpropagate from this node; requires a scalar unless grad given."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without explicit grad needs a scalar loss")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = _accum(self.grad, grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    # -- reductions / shaping as methods ------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(x, name: str | None = None) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def _accum(grad, update):
    if grad is None:
        return update
    return grad + update


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _add_grad(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = _accum(t.grad, g)


# -- binary elementwise ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _add_grad(a, _unbroadcast(g, a.shape))
        _add_grad(b, _unbroadcast(g, b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        _add_grad(a, _unbroadcast(g, a.shape))
        _add_grad(b, _unbroadcast(-g, b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _add_grad(a, _unbroadcast(g * b.data, a.shape))
        _add_grad(b, _unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        _add_grad(a, _unbroadcast(g / b.data, a.shape))
        _add_grad(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.maximum(a.data, b.data)
    pick_a = a.data >= b.data

    def backward(g):
        _add_grad(a, _unbroadcast(np.where(pick_a, g, 0.0), a.shape))
        _add_grad(b, _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.minimum(a.data, b.data)
    pick_a = a.data <= b.data

    def backward(g):
        _add_grad(a, _unbroadcast(np.where(pick_a, g, 0.0), a.shape))
        _add_grad(b, _unbroadcast(np.where(pick_a, 0.0, g), b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


# -- unary elementwise -------------------------------------------------------

def _unary(a, out_data, dfun) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _add_grad(a, g * dfun())

    return Tensor(out_data, parents=(a,), backward=backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _unary(a, out, lambda: out)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.log(a.data), lambda: 1.0 / a.data)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _unary(a, out, lambda: 0.5 / out)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _unary(a, out, lambda: 1.0 - out * out)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = scipy.special.expit(a.data)
    return _unary(a, out, lambda: out * (1.0 - out))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.abs(a.data), lambda: np.sign(a.data))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.sin(a.data), lambda: np.cos(a.data))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.cos(a.data), lambda: -np.sin(a.data))


def power(a, p) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _unary(a, a.data ** p, lambda: p * a.data ** (p - 1.0))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero outside the open interval."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _unary(a, np.clip(a.data, lo, hi), lambda: inside.astype(np.float64))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _unary(a, np.where(pos, a.data, 0.0), lambda: pos.astype(np.float64))


# -- reductions --------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _add_grad(a, np.ascontiguousarray(np.broadcast_to(gg, a.shape)))

    return Tensor(out_data, parents=(a,), backward=backward)


def tmax(a) -> Tensor:
    """Global maximum; gradient routes to the first argmax element."""
    a = as_tensor(a)
    idx = int(np.argmax(a.data))

    def backward(g):
        full = np.zeros(a.size)
        full[idx] = float(g)
        _add_grad(a, full.reshape(a.shape))

    return Tensor(a.data.reshape(-1)[idx], parents=(a,), backward=backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- shaping -----------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _add_grad(a, g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), parents=(a,), backward=backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def backward(g):
        _add_grad(a, g.transpose(inv))

    return Tensor(a.data.transpose(axes), parents=(a,), backward=backward)


def tslice(a, key) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[key] = g
        _add_grad(a, full)

    return Tensor(a.data[key], parents=(a,), backward=backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _add_grad(t, piece)

    return Tensor(out_data, parents=tuple(tensors), backward=backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            _add_grad(t, np.take(g, i, axis=axis))

    return Tensor(out_data, parents=tuple(tensors), backward=backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        if b.ndim >= 2:
            ga = g @ np.swapaxes(b.data, -1, -2)
        else:
            ga = np.outer(g, b.data) if a.ndim == 2 else g[..., None] * b.data
        if a.ndim >= 2:
            gb = np.swapaxes(a.data, -1, -2) @ g
        else:
            gb = np.outer(a.data, g) if b.ndim == 2 else a.data[..., None] * g
        _add_grad(a, _unbroadcast(ga, a.shape))
        _add_grad(b, _unbroadcast(gb, b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def take(a, idx: np.ndarray) -> Tensor:
    """Gather from the flattened tensor; idx is an integer ndarray."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out_data = a.data.reshape(-1)[idx]

    def backward(g):
        flat = np.zeros(a.size, dtype=np.float64)
        np.add.at(flat, idx.reshape(-1), g.reshape(-1))
        _add_grad(a, flat.reshape(a.shape))

    return Tensor(out_data, parents=(a,), backward=backward)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select elementwise by a boolean ndarray (the condition is off-tape)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out_data = np.where(cond, a.data, b.data)

    def backward(g):
        _add_grad(a, _unbroadcast(np.where(cond, g, 0.0), a.shape))
        _add_grad(b, _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = sub(a, Tensor(a.data.max(axis=axis, keepdims=True)))
    e = exp(shifted)
    return div(e, tsum(e, axis=axis, keepdims=True))
