"""A small reverse-mode tape over numpy arrays.

Every function in this module accepts either plain ndarrays or :class:`Var`
objects.  With ndarrays it just computes; with a ``Var`` it also records the
operation on that variable's :class:`Tape`.  Both paths run the same numpy
expression, so a forward pass with and without recording is bit-identical.

Only the operations in :data:`VOCABULARY` can be recorded.  Applying any
other numpy ufunc to a ``Var`` raises :class:`TapeError` immediately, at
record time.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

VOCABULARY = frozenset({
    # graph primitives
    "gather", "scatter_sum",
    # dense affine pieces
    "matmul", "transpose", "reshape",
    # elementwise
    "add", "sub", "mul", "div", "neg", "tanh", "sigmoid", "softplus", "sqrt",
    "huber_grad", "normalize_rows",
    # reductions and losses
    "sum", "softmax_ce",
    # node-wise projections with stored masks
    "prox",
})


class TapeError(RuntimeError):
    """Raised when an operation outside the vocabulary touches a Var."""


class Var:
    """An array value recorded on a tape."""

    __slots__ = ("tape", "value", "grad", "index", "name")
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", value: np.ndarray, index: int, name: str | None = None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.index = index
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return neg(self)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        routes = {np.add: add, np.subtract: sub, np.multiply: mul,
                  np.true_divide: div, np.matmul: matmul, np.negative: neg}
        if method == "__call__" and ufunc in routes and not kwargs:
            return routes[ufunc](*inputs)
        raise TapeError(f"operation {ufunc.__name__!r} is not in the tape vocabulary")

    def __array_function__(self, func, types, args, kwargs):
        raise TapeError(f"operation {func.__name__!r} is not in the tape vocabulary")


class _Node:
    __slots__ = ("op", "parents", "forward", "backward", "var")

    def __init__(self, op, parents, forward, backward, var):
        self.op = op
        self.parents = parents
        self.forward = forward
        self.backward = backward
        self.var = var


class Tape:
    """Ordered record of operations; leaves first."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, value, name: str | None = None) -> Var:
        v = Var(self, np.asarray(value, dtype=np.float64), len(self.nodes), name)
        self.nodes.append(_Node("leaf", (), None, None, v))
        return v

    def record(self, op: str, parents: tuple[Var, ...], value: np.ndarray,
               forward: Callable, backward: Callable) -> Var:
        if op not in VOCABULARY:
            raise TapeError(f"operation {op!r} is not in the tape vocabulary")
        for p in parents:
            if p.tape is not self:
                raise TapeError("operands recorded on different tapes")
        v = Var(self, value, len(self.nodes))
        self.nodes.append(_Node(op, parents, forward, backward, v))
        return v

    def backward(self, out: Var, seed: np.ndarray | None = None) -> None:
        """Accumulate d(out)/d(var) into ``var.grad`` for every recorded var."""
        if out.tape is not self:
            raise TapeError("output was recorded on a different tape")
        for node in self.nodes:
            node.var.grad = None
        out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(self.nodes[: out.index + 1]):
            g = node.var.grad
            if g is None or not node.parents:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None:
                    continue
                pg = _unbroadcast(pg, parent.value.shape)
                parent.grad = pg if parent.grad is None else parent.grad + pg

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves; returns values in record order."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.forward is None:
                values.append(node.var.value)
            else:
                values.append(node.forward(*(values[p.index] for p in node.parents)))
        return values

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def value(x):
    """The array behind ``x`` (identity for ndarrays)."""
    return x.value if isinstance(x, Var) else x


def _binary(op: str, fn: Callable, a, b, grads: Callable):
    av, bv = value(a), value(b)
    out = fn(av, bv)
    a_var, b_var = isinstance(a, Var), isinstance(b, Var)
    if not (a_var or b_var):
        return out
    tape = a.tape if a_var else b.tape
    if a_var and b_var:
        return tape.record(op, (a, b), out, fn, lambda g: grads(g, av, bv, out))
    if a_var:
        return tape.record(op, (a,), out, lambda x: fn(x, bv),
                           lambda g: grads(g, av, bv, out)[:1])
    return tape.record(op, (b,), out, lambda y: fn(av, y),
                       lambda g: grads(g, av, bv, out)[1:])


def _unary(op: str, fn: Callable, x, grad: Callable):
    xv = value(x)
    out = fn(xv)
    if not isinstance(x, Var):
        return out
    return x.tape.record(op, (x,), out, fn, lambda g: (grad(g, xv, out),))


# ----------------------------------------------------------------------
# elementwise

def add(a, b):
    return _binary("add", np.add, a, b, lambda g, x, y, o: (g, g))


def sub(a, b):
    return _binary("sub", np.subtract, a, b, lambda g, x, y, o: (g, -g))


def mul(a, b):
    return _binary("mul", np.multiply, a, b, lambda g, x, y, o: (g * y, g * x))


def div(a, b):
    return _binary("div", np.true_divide, a, b,
                   lambda g, x, y, o: (g / y, -g * x / (y * y)))


def neg(x):
    return _unary("neg", np.negative, x, lambda g, x, o: -g)


def tanh(x):
    return _unary("tanh", np.tanh, x, lambda g, x, o: g * (1.0 - o * o))


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    return _unary("sigmoid", _sigmoid, x, lambda g, x, o: g * o * (1.0 - o))


def _softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(x):
    """``log(1 + exp(x))`` computed without overflow."""
    return _unary("softplus", _softplus, x, lambda g, x, o: g * _sigmoid(x))


def _sqrt_grad(g, x, o):
    # a zero upstream gradient stays zero at sqrt(0), e.g. an untouched Adam moment
    g = np.broadcast_to(g, np.shape(o))
    out = np.zeros(np.shape(o))
    nz = g != 0
    with np.errstate(divide="ignore"):
        out[nz] = g[nz] / (2.0 * np.broadcast_to(o, out.shape)[nz])
    return out


def sqrt(x):
    return _unary("sqrt", np.sqrt, x, _sqrt_grad)


def _clip_unit(x):
    return np.clip(x, -1.0, 1.0)


def huber_grad(x):
    """Derivative of the unit-knee Huber penalty: ``clip(x, -1, 1)``."""
    return _unary("huber_grad", _clip_unit, x,
                  lambda g, x, o: g * (np.abs(x) < 1.0))


def _normalize_rows(z):
    z = np.asarray(z, dtype=np.float64)
    nrm = np.sqrt(np.sum(z * z, axis=-1, keepdims=True))
    safe = np.where(nrm > 0.0, nrm, 1.0)
    return np.where(nrm > 0.0, z / safe, 0.0)


def _normalize_rows_backward(g, z, out):
    nrm = np.sqrt(np.sum(z * z, axis=-1, keepdims=True))
    safe = np.where(nrm > 0.0, nrm, 1.0)
    proj = g - out * np.sum(out * g, axis=-1, keepdims=True)
    return np.where(nrm > 0.0, proj / safe, 0.0)


def normalize_rows(z):
    """``z / ||z||`` row-wise; zero rows map to zero."""
    return _unary("normalize_rows", _normalize_rows, z, _normalize_rows_backward)


# ----------------------------------------------------------------------
# shape and linear algebra

def transpose(x):
    return _unary("transpose", np.transpose, x, lambda g, x, o: np.transpose(g))


def reshape(x, shape):
    shape = tuple(shape)
    return _unary("reshape", lambda v: np.reshape(v, shape), x,
                  lambda g, x, o: np.reshape(g, x.shape))


def _matmul_grads(g, a, b, out):
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    raise TapeError(f"matmul of ranks {a.ndim} and {b.ndim} is not supported")


def matmul(a, b):
    return _binary("matmul", np.matmul, a, b, _matmul_grads)


def gather(x, idx: np.ndarray):
    """Rows ``x[idx]``."""
    idx = np.asarray(idx, dtype=np.int64)

    def grad(g, xv, out):
        acc = np.zeros_like(xv)
        np.add.at(acc, idx, g)
        return acc

    return _unary("gather", lambda v: v[idx], x, grad)


def scatter_sum(x, idx: np.ndarray, n: int):
    """``out[v] = sum of x[i] over i with idx[i] == v``, in index order."""
    idx = np.asarray(idx, dtype=np.int64)

    def fwd(v):
        out = np.zeros((n,) + v.shape[1:], dtype=np.float64)
        np.add.at(out, idx, v)
        return out

    return _unary("scatter_sum", fwd, x, lambda g, xv, o: g[idx])


def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    def grad(g, xv, out):
        if axis is None:
            return np.broadcast_to(g, xv.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy()

    return _unary("sum", lambda v: np.sum(v, axis=axis), x, grad)


def _log_softmax(z):
    zmax = z.max(axis=1, keepdims=True)
    s = z - zmax
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax_ce(logits, Y: np.ndarray, weights: np.ndarray):
    """``-sum_v weights[v] * sum_c Y[v,c] * log softmax(logits[v])_c``."""
    Y = np.asarray(Y, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)[:, None]

    def fwd(z):
        return -np.sum(w * Y * _log_softmax(z))

    def grad(g, z, out):
        p = np.exp(_log_softmax(z))
        return g * w * (p * Y.sum(axis=1, keepdims=True) - Y)

    return _unary("softmax_ce", fwd, logits, grad)


def custom_prox(x, forward: Callable, backward: Callable):
    """Record a node-wise projection with a caller-supplied backward rule.

    ``backward(x_in, upstream)`` receives the pre-projection input stored at
    forward time.
    """
    return _unary("prox", forward, x, lambda g, xv, o: backward(xv, g))
