"""Small reverse-mode automatic differentiation engine over numpy arrays.

Only the operations the backmapping networks need are provided. Every op
builds a new :class:`DiffTensor` that remembers its parents and a closure
propagating the output gradient to them; :func:`backward` walks the graph
once in reverse topological order.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import csr_matrix

_ids = itertools.count()


class DiffTensor:
    """An array node in a computation graph.

    Attributes:
        values: the forward value (float64 ndarray).
        grad: gradient of the last ``backward`` root w.r.t. this node, same shape
            as ``values``; ``None`` until a backward pass reaches it.
        requires_grad: whether gradients flow into this node.
        node_id: monotonically increasing id, used to order the graph.
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._parents: tuple[DiffTensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def __len__(self) -> int:
        return len(self.values)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.values.copy())

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(x)


def _node(values: np.ndarray, parents: Sequence[DiffTensor], backward_fn) -> DiffTensor:
    out = DiffTensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: DiffTensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # gradients are never modified in place, so sharing the array is safe
        t.grad = np.asarray(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topological_order(root: DiffTensor) -> list[DiffTensor]:
    order: list[DiffTensor] = []
    seen: set[int] = set()
    stack: list[tuple[DiffTensor, bool]] = [(root, False)]
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
    return order


def backward(root: DiffTensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` of every node reachable from ``root``.

    Gradients of intermediate nodes are reset first, so calling backward twice
    on the same root does not double count; leaf gradients accumulate, which
    is what gradient accumulation over micro-batches relies on.
    """
    if not root.requires_grad:
        return
    order = _topological_order(root)
    for node in order:
        if node._backward is not None:
            node.grad = None
    seed = np.ones_like(root.values) if grad is None else np.asarray(grad, dtype=np.float64)
    if root._backward is None:
        _accumulate(root, seed)
        return
    root.grad = seed.copy()
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# elementwise arithmetic


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.values + b.values, (a, b), bw)


def sub(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.values - b.values, (a, b), bw)


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _node(a.values * b.values, (a, b), bw)


def div(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values / b.values

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.values, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.values, b.shape))

    return _node(out, (a, b), bw)


def power(a, exponent: float) -> DiffTensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g * exponent * a.values ** (exponent - 1))

    return _node(a.values**exponent, (a,), bw)


def square(a) -> DiffTensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, 2.0 * g * a.values)

    return _node(a.values * a.values, (a,), bw)


def sqrt(a, eps: float = 0.0) -> DiffTensor:
    """``sqrt(a + eps)``; a small ``eps`` keeps the gradient finite at zero."""
    a = as_tensor(a)
    out = np.sqrt(a.values + eps)

    def bw(g):
        _accumulate(a, g * 0.5 / out)

    return _node(out, (a,), bw)


def exp(a) -> DiffTensor:
    a = as_tensor(a)
    out = np.exp(a.values)

    def bw(g):
        _accumulate(a, g * out)

    return _node(out, (a,), bw)


def log(a) -> DiffTensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g / a.values)

    return _node(np.log(a.values), (a,), bw)


def cos(a) -> DiffTensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, -g * np.sin(a.values))

    return _node(np.cos(a.values), (a,), bw)


def sigmoid(a) -> DiffTensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.values))

    def bw(g):
        _accumulate(a, g * out * (1.0 - out))

    return _node(out, (a,), bw)


def swish(a) -> DiffTensor:
    """``x * sigmoid(x)`` (beta = 1)."""
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.values))

    def bw(g):
        _accumulate(a, g * (s + a.values * s * (1.0 - s)))

    return _node(a.values * s, (a,), bw)


def clip(a, lo: float, hi: float) -> DiffTensor:
    a = as_tensor(a)
    inside = (a.values >= lo) & (a.values <= hi)

    def bw(g):
        _accumulate(a, g * inside)

    return _node(np.clip(a.values, lo, hi), (a,), bw)


def where(mask: np.ndarray, a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.where(mask, 0.0, g), b.shape))

    return _node(np.where(mask, a.values, b.values), (a, b), bw)


# linear algebra and reductions


def matmul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape))

    return _node(a.values @ b.values, (a, b), bw)


def tsum(a, axis=None, keepdims: bool = False) -> DiffTensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(a.values.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> DiffTensor:
    a = as_tensor(a)
    if axis is None:
        count = a.values.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> DiffTensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(a.values.reshape(shape), (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> DiffTensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _node(np.concatenate([t.values for t in ts], axis=axis), ts, bw)


def scatter_rows(values: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    """``out[index[e]] += values[e]`` as a sparse product (fixed summation order)."""
    m = len(index)
    out_shape = (n_rows,) + values.shape[1:]
    if m == 0:
        return np.zeros(out_shape)
    sel = csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n_rows, m))
    return np.asarray(sel @ values.reshape(m, -1)).reshape(out_shape)


def take(a, index: np.ndarray) -> DiffTensor:
    """Gather rows ``a[index]`` along the first axis."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        _accumulate(a, scatter_rows(g, index, a.shape[0]))

    return _node(a.values[index], (a,), bw)


def segment_sum(a, segment: np.ndarray, n_segments: int) -> DiffTensor:
    """Scatter-add rows of ``a`` into ``n_segments`` buckets given by ``segment``."""
    a = as_tensor(a)
    segment = np.asarray(segment, dtype=np.int64)
    out = scatter_rows(a.values, segment, n_segments)

    def bw(g):
        _accumulate(a, g[segment])

    return _node(out, (a,), bw)


def cross(a, b) -> DiffTensor:
    """Row-wise 3D cross product over the last axis."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.cross(b.values, g), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.cross(g, a.values), b.shape))

    return _node(np.cross(a.values, b.values), (a, b), bw)


def norm(a, axis: int = -1, eps: float = 1e-12) -> DiffTensor:
    """Euclidean norm along ``axis``, smoothed by ``eps`` under the square root."""
    return sqrt(tsum(square(a), axis=axis), eps=eps)


def gradient_check(op: Callable[[DiffTensor], DiffTensor], x: DiffTensor, eps: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of scalar ``op`` and
    central finite differences, ``|a - n| / (|n| + 1e-8)`` over coordinates of ``x``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = x.values.copy()
    probe = DiffTensor(base.copy(), requires_grad=True)
    out = op(probe)
    if out.values.size != 1:
        raise ValueError("gradient_check needs a scalar-valued op")
    backward(out)
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for k in range(base.size):
        shifted = base.copy().reshape(-1)
        shifted[k] += eps
        f_plus = float(op(DiffTensor(shifted.reshape(base.shape))).values)
        shifted[k] -= 2.0 * eps
        f_minus = float(op(DiffTensor(shifted.reshape(base.shape))).values)
        flat[k] = (f_plus - f_minus) / (2.0 * eps)
    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(rel.max()) if rel.size else 0.0
