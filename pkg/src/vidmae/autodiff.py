"""Dense float64 tensors with reverse-mode automatic differentiation.

A small define-by-run engine: every operation records its inputs and a
backward rule, and ``backward()`` walks the recorded graph in reverse
topological order, accumulating gradients into leaf tensors. Arrays are
plain numpy, row-major, float64 throughout. Any operation that produces
a NaN or Inf raises :class:`NumericsError` immediately rather than
letting it propagate silently.

Graphs are rebuilt on every forward pass. A graph must never be mutated
from two threads concurrently; numpy/BLAS may parallelize individual
kernels internally, which stays deterministic for a fixed thread count.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericsError

__all__ = [
    "Tensor",
    "add",
    "subtract",
    "multiply",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "concatenate",
    "stack",
    "gather",
    "scatter",
    "softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "squared_error",
    "cross_entropy",
    "backward",
]


def _ensure_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by '{op}'")


def _unbroadcast(grad, shape):
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array plus the graph edge that produced it.

    ``requires_grad`` marks leaves that should receive a ``.grad`` array
    after ``backward()``; operation outputs inherit the flag from their
    inputs. Gradients accumulate across multiple uses of the same leaf.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backprop", "_op", "_backward_ran")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        _ensure_finite(self.data, "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backprop = None
        self._op = "leaf"
        self._backward_ran = False

    @classmethod
    def _from_op(cls, data, parents, backprop, op):
        _ensure_finite(data, op)
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = any(p.requires_grad for p in parents)
        t.grad = None
        # Drop edges when nothing upstream needs a gradient.
        t._parents = tuple(parents) if t.requires_grad else ()
        t._backprop = backprop if t.requires_grad else None
        t._op = op
        t._backward_ran = False
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- arithmetic sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise DimensionError("tensor/tensor division is not a primitive; multiply by a reciprocal")
        return scale(self, 1.0 / float(c))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return _reduce(self, axis, keepdims, mean=False)

    def mean(self, axis=None, keepdims=False):
        return _reduce(self, axis, keepdims, mean=True)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op!r}{grad})"


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


# -- elementwise arithmetic ----------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backprop(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._from_op(data, (a, b), backprop, "add")


def subtract(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backprop(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._from_op(data, (a, b), backprop, "subtract")


def multiply(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backprop(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor._from_op(data, (a, b), backprop, "multiply")


def scale(a, factor):
    a = _as_tensor(a)
    f = float(factor)

    def backprop(g):
        return (g * f,)

    return Tensor._from_op(a.data * f, (a,), backprop, "scale")


# -- linear algebra --------------------------------------------------------


def matmul(a, b):
    """Matrix product over the trailing two dims, batched over leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-dim operands, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.data.shape} x {b.data.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as err:
        raise DimensionError(f"matmul batch shapes incompatible: {a.data.shape} x {b.data.shape}") from err

    def backprop(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return Tensor._from_op(data, (a, b), backprop, "matmul")


# -- shape manipulation -----------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(f"cannot reshape {a.data.shape} to {shape}") from err

    def backprop(g):
        return (g.reshape(a.data.shape),)

    return Tensor._from_op(data, (a,), backprop, "reshape")


def transpose(a, axes=None):
    """Permute axes; with ``axes=None`` swap the trailing two."""
    a = _as_tensor(a)
    if a.data.ndim < 2:
        raise DimensionError("transpose needs at least 2 dims")
    if axes is None:
        axes = list(range(a.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise DimensionError(f"invalid axis permutation {axes} for {a.data.ndim} dims")
    inverse = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def backprop(g):
        return (np.transpose(g, inverse),)

    return Tensor._from_op(data, (a,), backprop, "transpose")


def concatenate(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concatenate needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise DimensionError(f"concatenate shape mismatch along axis {axis}") from err
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backprop(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(data, tensors, backprop, "concatenate")


def stack(tensors, axis=0):
    """Stack along a new axis (composite of reshape + concatenate)."""
    tensors = [_as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.data.shape)
        shape.insert(axis if axis >= 0 else t.data.ndim + 1 + axis, 1)
        expanded.append(reshape(t, shape))
    return concatenate(expanded, axis=axis)


# -- indexed selection ------------------------------------------------------


def _index_list(indices, extent, op):
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError(f"{op} expects a flat index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= extent):
        raise DimensionError(f"{op} index out of range for extent {extent}")
    return idx


def gather(a, indices, axis=0):
    """Select slices of ``a`` along ``axis`` by a flat index list."""
    a = _as_tensor(a)
    idx = _index_list(indices, a.data.shape[axis], "gather")
    data = np.take(a.data, idx, axis=axis)

    def backprop(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return Tensor._from_op(data, (a,), backprop, "gather")


def scatter(a, indices, size, axis=0):
    """Place slices of ``a`` at ``indices`` in a zero tensor of the given extent.

    Row ``i`` of ``a`` lands at position ``indices[i]``; duplicate indices
    accumulate. ``scatter(gather(x, v), v, n) + scatter(gather(x, m), m, n)``
    reconstructs ``x`` exactly when ``v`` and ``m`` partition ``range(n)``.
    """
    a = _as_tensor(a)
    size = int(size)
    idx = _index_list(indices, size, "scatter")
    if idx.size != a.data.shape[axis]:
        raise DimensionError(f"scatter got {idx.size} indices for extent {a.data.shape[axis]}")
    shape = list(a.data.shape)
    shape[axis] = size
    data = np.zeros(shape, dtype=np.float64)
    np.add.at(np.moveaxis(data, axis, 0), idx, np.moveaxis(a.data, axis, 0))

    def backprop(g):
        return (np.take(g, idx, axis=axis),)

    return Tensor._from_op(data, (a,), backprop, "scatter")


# -- nonlinearities ---------------------------------------------------------


def softmax(a):
    """Numerically stable softmax over the last dim."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backprop(g):
        s = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - s),)

    return Tensor._from_op(y, (a,), backprop, "softmax")


def layer_norm(a, gain, bias, eps=1e-6):
    """Normalize the last dim to zero mean / unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    if gain.data.shape != a.data.shape[-1:] or bias.data.shape != a.data.shape[-1:]:
        raise DimensionError("layer_norm gain/bias must match the last dim")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    data = gain.data * xhat + bias.data

    def backprop(g):
        lead = tuple(range(g.ndim - 1))
        dxh = g * gain.data
        dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(data, (a, gain, bias), backprop, "layer_norm")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    data = 0.5 * x * (1.0 + th)

    def backprop(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du),)

    return Tensor._from_op(data, (a,), backprop, "gelu")


def sigmoid(a):
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))

    def backprop(g):
        return (g * y * (1.0 - y),)

    return Tensor._from_op(y, (a,), backprop, "sigmoid")


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def backprop(g):
        return (g * (1.0 - y**2),)

    return Tensor._from_op(y, (a,), backprop, "tanh")


def exp(a):
    a = _as_tensor(a)
    y = np.exp(a.data)

    def backprop(g):
        return (g * y,)

    return Tensor._from_op(y, (a,), backprop, "exp")


def log(a):
    a = _as_tensor(a)

    def backprop(g):
        return (g / a.data,)

    return Tensor._from_op(np.log(a.data), (a,), backprop, "log")


def sqrt(a):
    """Elementwise square root; differentiable only for strictly positive input."""
    a = _as_tensor(a)
    y = np.sqrt(a.data)

    def backprop(g):
        return (g * 0.5 / y,)

    return Tensor._from_op(y, (a,), backprop, "sqrt")


def absolute(a):
    """Elementwise |x|; subgradient 0 at the origin."""
    a = _as_tensor(a)

    def backprop(g):
        return (g * np.sign(a.data),)

    return Tensor._from_op(np.abs(a.data), (a,), backprop, "absolute")


# -- reductions -------------------------------------------------------------


def _reduce(a, axis, keepdims, mean):
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims) if mean else a.data.sum(axis=axis, keepdims=keepdims)
    count = a.data.size / data.size if mean else 1.0

    def backprop(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / count,)

    return Tensor._from_op(np.asarray(data), (a,), backprop, "mean" if mean else "sum")


def squared_error(a, b):
    """Mean of elementwise squared differences (composite primitive)."""
    d = subtract(a, b)
    return multiply(d, d).mean()


def cross_entropy(logits, labels):
    """Mean cross-entropy from raw logits; labels are integer class ids.

    Fused stable log-softmax forward with the (softmax - onehot)/batch
    backward rule.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects (batch, classes) logits, got {logits.data.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    n, p = logits.data.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= p):
        raise DimensionError(f"label out of range for {p} classes")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def backprop(g):
        gz = np.exp(logp)
        gz[np.arange(n), labels] -= 1.0
        return (gz * (g / n),)

    return Tensor._from_op(np.asarray(loss), (logits,), backprop, "cross_entropy")


# -- reverse pass -----------------------------------------------------------


def backward(loss):
    """Populate ``.grad`` on every reachable leaf with ``requires_grad``.

    The loss must be scalar. Running backward twice on the same output
    without re-running the forward pass is a contract violation.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._backward_ran:
        raise ContractError("backward already ran on this graph; re-run the forward pass first")
    loss._backward_ran = True
    if not loss.requires_grad:
        return

    # Iterative post-order DFS over parents (graph is acyclic by construction).
    order = []
    seen = {id(loss)}
    stack_ = [(loss, iter(loss._parents))]
    while stack_:
        node, it = stack_[-1]
        advanced = False
        for parent in it:
            if id(parent) not in seen and parent.requires_grad:
                seen.add(id(parent))
                stack_.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack_.pop()

    grads = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backprop is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backprop(g)):
            if not parent.requires_grad or pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
