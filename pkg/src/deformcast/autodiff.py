"""Reverse-mode differentiation over dense numpy arrays.

Only the operators the deformation network and its losses need are
provided. Every op checks its output for NaN/Inf and raises
:class:`NumericFaultError` instead of propagating garbage.

>>> x = Var(np.ones((2, 2)), requires_grad=True)
>>> loss = mean_all(x)
>>> backward(loss)
>>> x.grad
array([[0.25, 0.25],
       [0.25, 0.25]])
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import GradientStateError, NumericFaultError, ShapeMismatchError


class Var:
    """A node in the expression graph.

    Parameters
    ----------
    values : array_like
        Up to three axes.
    requires_grad : bool
        Leaves that should receive gradients (parameters) set this. Results
        of ops inherit it from their inputs.
    """

    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad=False, name=None):
        v = np.asarray(values)
        if v.dtype.kind != "f":
            v = v.astype(np.float64)
        if v.ndim > 3:
            raise ShapeMismatchError(f"Var supports at most 3 axes, got shape {v.shape}")
        self.values = v
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def as_var(x, dtype=None):
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=dtype))


def _result(values, op, parents, backward_fn):
    if not np.all(np.isfinite(values)):
        raise NumericFaultError(f"non-finite values produced by {op}")
    out = Var(values)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# operators

def matmul(a, b):
    a, b = as_var(a), as_var(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.values, b.values
    return _result(A @ B, "matmul", (a, b), lambda g, need: (
        g @ B.T if need[0] else None, A.T @ g if need[1] else None))


def add(a, b):
    a, b = as_var(a), as_var(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.values + b.values, "add", (a, b),
                   lambda g, need: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_var(a), as_var(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.values - b.values, "sub", (a, b),
                   lambda g, need: (_unbroadcast(g, sa), -_unbroadcast(g, sb) if need[1] else None))


def mul(a, b):
    """Elementwise product with broadcasting."""
    a, b = as_var(a), as_var(b)
    _check_broadcast(a, b, "mul")
    A, B = a.values, b.values
    return _result(A * B, "mul", (a, b), lambda g, need: (
        _unbroadcast(g * B, A.shape) if need[0] else None,
        _unbroadcast(g * A, B.shape) if need[1] else None))


def scale(a, c):
    a = as_var(a)
    c = a.values.dtype.type(c)
    return _result(a.values * c, "scale", (a,), lambda g, need: (g * c,))


def relu(a):
    a = as_var(a)
    mask = a.values > 0
    # gradient at exactly 0 is 0
    return _result(a.values * mask, "relu", (a,), lambda g, need: (g * mask,))


def softmax_rows(a):
    """Softmax along the last axis."""
    a = as_var(a)
    z = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g, need):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _result(s, "softmax_rows", (a,), back)


def concat_cols(*vs):
    """Concatenate along the last axis."""
    vs = tuple(as_var(v) for v in vs)
    lead = {v.shape[:-1] for v in vs}
    if len(lead) != 1:
        raise ShapeMismatchError(f"concat_cols: incompatible shapes {[v.shape for v in vs]}")
    cuts = np.cumsum([v.shape[-1] for v in vs])[:-1]

    def back(g, need):
        return tuple(np.split(g, cuts, axis=-1))

    return _result(np.concatenate([v.values for v in vs], axis=-1), "concat_cols", vs, back)


def transpose(a):
    a = as_var(a)
    if a.values.ndim != 2:
        raise ShapeMismatchError(f"transpose expects 2 axes, got {a.shape}")
    return _result(a.values.T.copy(), "transpose", (a,), lambda g, need: (g.T,))


def spmm(s, x):
    """Sparse-times-dense product ``S @ X``.

    ``s`` is a :class:`SparseAdjacency` or any scipy sparse matrix.
    """
    x = as_var(x)
    m = s.matrix(x.dtype) if isinstance(s, SparseAdjacency) else s
    if m.shape[1] != x.shape[0]:
        raise ShapeMismatchError(f"spmm: incompatible shapes {m.shape} and {x.shape}")
    mt = m if isinstance(s, SparseAdjacency) else m.T.tocsr()
    return _result(np.asarray(m @ x.values), "spmm", (x,), lambda g, need: (np.asarray(mt @ g),))


def mean_all(a):
    a = as_var(a)
    n = a.values.size
    shape, dt = a.shape, a.dtype
    return _result(np.asarray(a.values.mean()), "mean_all", (a,),
                   lambda g, need: (np.full(shape, g / n, dtype=dt),))


def sum_all(a):
    a = as_var(a)
    shape, dt = a.shape, a.dtype
    return _result(np.asarray(a.values.sum()), "sum_all", (a,),
                   lambda g, need: (np.full(shape, g, dtype=dt),))


def sum_rows(a):
    """Sum over the last axis: (N, F) -> (N,)."""
    a = as_var(a)
    shape = a.shape
    return _result(a.values.sum(axis=-1), "sum_rows", (a,),
                   lambda g, need: (np.broadcast_to(g[..., None], shape).copy(),))


def row_norms(a):
    """Euclidean norm of each row: (N, F) -> (N,). Zero rows get a zero gradient."""
    a = as_var(a)
    A = a.values
    n = np.sqrt(np.sum(A * A, axis=-1))
    safe = np.where(n > 0, n, 1).astype(A.dtype)

    def back(g, need):
        return ((g / safe)[..., None] * A * (n > 0)[..., None],)

    return _result(n, "row_norms", (a,), back)


# ----------------------------------------------------------------------------
# reverse pass

def _topological(root):
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` of every ancestor of the scalar ``loss``.

    Gradients from multiple uses of the same Var are summed. Calling twice
    on graphs whose gradients were not cleared (see :func:`zero_grad`)
    raises :class:`GradientStateError`.
    """
    if loss.values.size != 1:
        raise GradientStateError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    if any(node.grad is not None for node in order):
        raise GradientStateError("gradients already materialized; call zero_grad first")
    acc = {id(loss): np.ones_like(loss.values)}
    owned = set()  # ids whose accumulator may be updated in place
    for node in reversed(order):
        g = acc.get(id(node))
        if g is None:
            g = np.zeros_like(node.values)
        node.grad = g
        if node._backward is None:
            continue
        need = tuple(p.requires_grad for p in node._parents)
        for p, gp in zip(node._parents, node._backward(g, need)):
            if not p.requires_grad:
                continue
            key = id(p)
            if key not in acc:
                acc[key] = gp
            elif key in owned:
                acc[key] += gp
            else:
                acc[key] = acc[key] + gp
                owned.add(key)


def zero_grad(vars_):
    for v in vars_:
        v.grad = None


# ----------------------------------------------------------------------------
# graph propagation operator

@dataclass(eq=False)
class SparseAdjacency:
    """Symmetric normalized adjacency ``D^-1/2 (A + I) D^-1/2`` in COO form."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def matrix(self, dtype=np.float64):
        dtype = np.dtype(dtype)
        if dtype not in self._cache:
            self._cache[dtype] = sparse.csr_matrix(
                (self.weights.astype(dtype), (self.rows, self.cols)), shape=(self.n, self.n)
            )
        return self._cache[dtype]

    def dense(self):
        return self.matrix().toarray()


def build_adjacency(graph):
    n = graph.n_nodes
    e = graph.edges
    rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
    cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    inv_sqrt = 1.0 / np.sqrt(deg)
    w = inv_sqrt[rows] * inv_sqrt[cols]
    order = np.lexsort((cols, rows))
    return SparseAdjacency(n, rows[order], cols[order], w[order])
