"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every array in the network is a :class:`Tensor`. Operations on tensors that
require gradients record their parents and a backward closure; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order and accumulates into ``.grad`` of every leaf that requires
gradients. Intermediate gradients are never stored on the tensors.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict

import numpy as np

from .exceptions import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(value):
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy-style broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"shapes {tuple(a)} and {tuple(b)} are not broadcastable") from None


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @classmethod
    def _make(cls, data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
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
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


class Parameter(Tensor):
    """Trainable leaf tensor with a registry name."""

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


# elementwise ----------------------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = _unbroadcast(g, sa) if a.requires_grad else None
        gb = _unbroadcast(g, sb) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data + b.data, (a, b), backward)


def neg(a):
    a = _lift(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad * bd, (a, b), backward)


def div(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def scale(a, factor):
    a = _lift(a)
    factor = float(factor)
    return Tensor._make(a.data * factor, (a,), lambda g: (g * factor,))


def power(a, exponent):
    a = _lift(a)
    exponent = float(exponent)
    ad = a.data
    out = ad**exponent

    def backward(g):
        return (g * exponent * ad ** (exponent - 1.0),)

    return Tensor._make(out, (a,), backward)


def exp(a):
    a = _lift(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a):
    a = _lift(a)
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a):
    a = _lift(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = _lift(a)
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = _lift(a)
    ad = a.data
    return Tensor._make(np.logaddexp(0.0, ad), (a,), lambda g: (g * _sigmoid(ad),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    a = _lift(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (a,), backward)


def elementwise(op, *args):
    """Dispatch by name: tanh, sigmoid, exp, add, mul, scale."""
    table = {
        "tanh": tanh,
        "sigmoid": sigmoid,
        "exp": exp,
        "add": add,
        "mul": mul,
        "scale": scale,
        "softplus": softplus,
        "gelu": gelu,
    }
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# reductions and shape ---------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims=False):
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum_(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {orig} into {tuple(shape)}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a, key):
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return Tensor._make(np.array(a.data[key]), (a,), backward)


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(out, tensors, backward)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tensors, backward)


# linear algebra ---------------------------------------------------------


def matmul(a, b):
    """Batched matrix product with broadcasting over leading axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                # shared weight: fold batch axes into one product
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward)


def rms_norm(x, gain, eps=1e-6):
    """``x / sqrt(mean(x**2, -1) + eps) * gain`` over the last axis."""
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise DimensionError(f"rms_norm gain shape {gain.shape} does not match last axis of {x.shape}")
    ms = mean(x * x, axis=-1, keepdims=True)
    return x * power(ms + eps, -0.5) * gain


# row routing ------------------------------------------------------------


def _check_rows(idx, n_rows):
    idx = np.asarray(idx)
    if idx.size and not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"row indices must be integers, got dtype {idx.dtype}")
    idx = idx.astype(np.intp, copy=False)
    if idx.size:
        bad = idx[(idx < 0) | (idx >= n_rows)]
        if bad.size:
            raise IndexError(f"row index {int(bad[0])} out of range [0, {n_rows})")
    return idx


def gather_rows(x, idx):
    """Rows of ``x`` at ``idx``; output shape is ``idx.shape + x.shape[1:]``."""
    x = _lift(x)
    idx = _check_rows(idx, x.shape[0])
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(x.data[idx], (x,), backward)


def scatter_add_rows(target, idx, rows):
    """Copy of ``target`` with ``rows`` added at ``idx``; duplicates accumulate in order."""
    target, rows = _lift(target), _lift(rows)
    idx = _check_rows(idx, target.shape[0])
    expected = idx.shape + target.shape[1:]
    if rows.shape != expected:
        raise DimensionError(f"scatter rows have shape {rows.shape}, expected {expected}")
    out = target.data.copy()
    np.add.at(out, idx, rows.data)

    def backward(g):
        return g, g[idx]

    return Tensor._make(out, (target, rows), backward)


# recurrences and losses -------------------------------------------------


def linear_recurrence(decay, drive, axis):
    """First-order scan ``h[t] = decay[t] * h[t-1] + drive[t]`` with ``h[-1] = 0``.

    Runs along ``axis``; ``decay`` and ``drive`` share one shape. Output at
    position t reads only positions ``<= t``.
    """
    decay, drive = _lift(decay), _lift(drive)
    if decay.shape != drive.shape:
        raise DimensionError(f"decay {decay.shape} and drive {drive.shape} differ")
    a = np.moveaxis(decay.data, axis, 0)
    u = np.moveaxis(drive.data, axis, 0)
    steps = a.shape[0]
    h = np.empty_like(u)
    state = np.zeros(u.shape[1:])
    for t in range(steps):
        state = a[t] * state + u[t]
        h[t] = state

    def backward(g):
        g = np.moveaxis(g, axis, 0)
        ga = np.zeros_like(a)
        gu = np.empty_like(u)
        carry = np.zeros(u.shape[1:])
        for t in range(steps - 1, -1, -1):
            carry = g[t] + carry
            gu[t] = carry
            if t > 0:
                ga[t] = carry * h[t - 1]
            carry = a[t] * carry
        return np.moveaxis(ga, 0, axis), np.moveaxis(gu, 0, axis)

    return Tensor._make(np.moveaxis(h, 0, axis), (decay, drive), backward)


def log_softmax(logits, axis=-1):
    x = logits.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (logits,), backward)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    targets = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy needs (N, K) logits and N targets, got {logits.shape}, {targets.shape}")
    if targets.size == 0:
        raise ContractError("cross_entropy over zero rows")
    logp = log_softmax(logits, axis=-1)
    rows = np.arange(targets.size)
    picked = index(logp, (rows, targets))
    return scale(sum_(picked), -1.0 / targets.size)


# parameter containers -----------------------------------------------------


class Module:
    """Ordered registry of parameters and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, child in enumerate(value):
                self._children[f"{name}.{i}"] = child
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        seen = {}
        out = OrderedDict()
        for name, p in self._iter_params(prefix):
            if id(p) in seen:
                raise ContractError(f"parameter registered twice: {seen[id(p)]} and {name}")
            seen[id(p)] = name
            out[name] = p
        return out

    def _iter_params(self, prefix):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child._iter_params(f"{prefix}{name}.")

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grads(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)
