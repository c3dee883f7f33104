"""A small reverse-mode autodiff engine on top of numpy.

Every op produces a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent. Graphs are
rebuilt on every forward pass; ``backward`` walks them once and frees them.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import DimensionError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_freed", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._freed = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- graph ------------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if self.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._freed:
            raise RuntimeError("backward already ran on this graph; rebuild it with a new forward pass")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")

        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._freed = True
        self._freed = True

    # -- operator sugar ---------------------------------------------------
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
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(data, parents, backward):
    """Wrap an op result; records the graph only when some parent needs grad."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------

def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot combine shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "add")
    return make_node(
        a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "sub")
    return make_node(
        a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")
    return make_node(
        a.data * b.data, (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def reciprocal(a):
    out = 1.0 / a.data
    return make_node(out, (a,), lambda g: (-g * out * out,))


def exp(a):
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a):
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def power(a, exponent):
    """Elementwise ``a ** exponent`` for a constant scalar exponent."""
    exponent = float(exponent)
    return make_node(a.data ** exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def sqrt(a):
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,))


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(a.data)
    # keep the range open: saturated logits would otherwise round to exactly 0 or 1
    info = np.finfo(out.dtype)
    out = np.clip(out, info.tiny, 1.0 - info.epsneg)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    pos = a.data > 0
    return make_node(np.where(pos, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * pos,))


def swish(a):
    s = _sigmoid(a.data)
    out = a.data * s
    return make_node(out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


# -- shape / reduction ---------------------------------------------------

def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if b.ndim == 2:
            ga = g @ b.data.T
            gb = np.tensordot(a.data, g, axes=(list(range(a.ndim - 1)), list(range(g.ndim - 1))))
            return unbroadcast(ga, a.shape), gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_node(out, (a, b), backward)


def tsum(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return make_node(a.data[idx], (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return make_node(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def pad_time(a, left, right):
    """Zero-pad axis -2 (time)."""
    widths = [(0, 0)] * a.ndim
    widths[-2] = (left, right)
    T = a.shape[-2]
    return make_node(np.pad(a.data, widths), (a,), lambda g: (g[..., left:left + T, :],))
