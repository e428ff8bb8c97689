"""Dense 2-D tensors with reverse-mode automatic differentiation.

A `Tape` records every differentiable operation executed inside its
``with`` block, in execution order; ``Tape.backward`` replays the nodes
in reverse and accumulates gradients into the leaf tensors that were
created with ``requires_grad=True``.  The op set is exactly what the
RBF network forward pass, its loss, and the MLP baseline need; there is
no broadcasting beyond 2-D and no GPU path.

Shape conventions: every tensor is 2-D.  Scalars are (1, 1), vectors
over a batch are column vectors (m, 1), and per-centroid vectors are
row vectors (1, N).  Elementwise binary ops broadcast a size-1 axis
against a sized one, as in numpy, but only in two dimensions.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy.spatial.distance import cdist as _sp_cdist

from .errors import DimensionError, DomainError, UsageError

_TLS = threading.local()


def _tape_stack():
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape():
    """The innermost open Tape, or None when not recording."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    """One recorded operation: operands, the output, and its backward rule."""

    __slots__ = ("inputs", "output", "backward_rule")

    def __init__(self, inputs, output, backward_rule):
        self.inputs = inputs
        self.output = output
        self.backward_rule = backward_rule


class Tape:
    """Ordered record of operations for one reverse-mode sweep.

    Operands of a node always precede it (ops append at execution
    time), so iterating ``nodes`` in reverse is a valid topological
    order for backpropagation.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def _record(self, inputs, output, backward_rule):
        self.nodes.append(_Node(inputs, output, backward_rule))
        return len(self.nodes) - 1

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad.

        Repeated calls without clearing gradients keep accumulating on
        the leaves; adjoints of intermediate tensors are scoped to one
        call.
        """
        if not isinstance(loss, Tensor) or loss.data.shape != (1, 1):
            raise UsageError("backward requires a scalar (1, 1) tensor")
        if loss.tape is not self:
            raise UsageError("the scalar was not produced on this tape")
        adjoints = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            out_grad = adjoints.pop(id(node.output), None)
            if out_grad is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward_rule(out_grad)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.tape is self and tensor.tape_id is not None:
                    key = id(tensor)
                    if key in adjoints:
                        adjoints[key] = adjoints[key] + grad
                    else:
                        adjoints[key] = grad
                else:
                    if tensor.grad is None:
                        tensor.grad = np.zeros_like(tensor.data)
                    tensor.grad += grad


class Tensor:
    """A 2-D array plus optional participation in a Tape.

    ``tape_id`` is the index of the node that produced this tensor on
    ``tape`` (None for leaves).  A detached tensor never accumulates
    gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape", "tape_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = None
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def item(self):
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data[0, 0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.tape is None:
            raise UsageError("tensor was not produced on a tape")
        self.tape.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other, self.data.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.data.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.data.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.data.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.data.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.data.dtype), self)

    def __neg__(self):
        return neg(self)


def _as_tensor(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _apply(inputs, out_data, backward_rule):
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        out.tape_id = tape._record(tuple(inputs), out, backward_rule)
    return out


def _check_broadcast(a, b):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}")


def _unbroadcast(grad, shape):
    # Sum gradient over axes that were broadcast in the forward pass.
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def add(a, b):
    _check_broadcast(a, b)

    def backward_rule(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _apply((a, b), a.data + b.data, backward_rule)


def sub(a, b):
    _check_broadcast(a, b)

    def backward_rule(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _apply((a, b), a.data - b.data, backward_rule)


def mul(a, b):
    _check_broadcast(a, b)
    a_data, b_data = a.data, b.data

    def backward_rule(g):
        return (
            _unbroadcast(g * b_data, a_data.shape),
            _unbroadcast(g * a_data, b_data.shape),
        )

    return _apply((a, b), a_data * b_data, backward_rule)


def neg(a):
    def backward_rule(g):
        return (-g,)

    return _apply((a,), -a.data, backward_rule)


def matmul(a, b):
    """Matrix product with dA = G Bᵀ, dB = Aᵀ G backward rules."""
    if a.cols != b.rows:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}"
        )
    a_data, b_data = a.data, b.data

    def backward_rule(g):
        return g @ b_data.T, a_data.T @ g

    return _apply((a, b), a_data @ b_data, backward_rule)


def cdist_pow(x, c, k):
    """Pairwise k-norm distances raised to the k-th power.

    Entry (i, j) is sum_t |x[i,t] - c[j,t]|**k, which is exactly zero
    when the rows coincide.  Differentiable in both arguments; at a
    coordinate tie with k=1 the subgradient 0 is used.
    """
    if x.cols != c.cols:
        raise DimensionError(
            f"feature dimensions disagree: {x.shape} vs {c.shape}"
        )
    if k < 1:
        raise DomainError(f"norm order must be >= 1, got {k}")
    x_data, c_data = x.data, c.data
    if k == 2:
        dist = _sp_cdist(x_data, c_data, "sqeuclidean")
    elif k == 1:
        dist = _sp_cdist(x_data, c_data, "cityblock")
    else:
        dist = _sp_cdist(x_data, c_data, "minkowski", p=k) ** k
    out_dtype = np.result_type(x_data.dtype, c_data.dtype)

    def backward_rule(g):
        if k == 2:
            # Avoids the (m, N, d) difference tensor via two GEMMs.
            gx = 2.0 * (x_data * g.sum(axis=1, keepdims=True) - g @ c_data)
            gc = 2.0 * (c_data * g.sum(axis=0)[:, None] - g.T @ x_data)
            return gx, gc
        gx = np.zeros_like(x_data)
        gc = np.zeros_like(c_data)
        chunk = max(1, int(4e6 // max(1, c_data.shape[0] * c_data.shape[1])))
        for lo in range(0, x_data.shape[0], chunk):
            hi = lo + chunk
            diff = x_data[lo:hi, None, :] - c_data[None, :, :]
            w = k * np.sign(diff) * np.abs(diff) ** (k - 1)
            gx[lo:hi] = np.einsum("ij,ijt->it", g[lo:hi], w)
            gc -= np.einsum("ij,ijt->jt", g[lo:hi], w)
        return gx, gc

    return _apply((x, c), dist.astype(out_dtype, copy=False), backward_rule)


def _softplus_np(x):
    out = np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))
    return out.astype(x.dtype, copy=False)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    """Elementwise ln(1 + e^x); returns x unchanged where x > 30."""
    x_data = x.data

    def backward_rule(g):
        return (g * _sigmoid_np(x_data),)

    return _apply((x,), _softplus_np(x_data), backward_rule)


def inverse_softplus(y):
    """Scalar inverse of softplus: ln(e^y - 1), clamped as ln of [1e-6, 1e4].

    Values y >= 5 pass through unchanged: softplus is identity-like
    there and the large-width initialization path relies on it.
    """
    y = float(y)
    if y <= 0:
        raise DomainError(f"inverse_softplus requires y > 0, got {y}")
    if y >= 5:
        return y
    return math.log(min(max(math.expm1(y), 1e-6), 1e4))


def exp(x):
    out_data = np.exp(x.data)

    def backward_rule(g):
        return (g * out_data,)

    return _apply((x,), out_data, backward_rule)


def log(x):
    x_data = x.data
    if np.any(x_data <= 0):
        raise DomainError("log requires strictly positive entries")

    def backward_rule(g):
        return (g / x_data,)

    return _apply((x,), np.log(x_data), backward_rule)


def log_sub_exp(a, b):
    """ln(e^a - e^b), computed stably via the elementwise maximum shift.

    Requires a > b everywhere (after broadcasting); equality would be
    the log of zero.
    """
    _check_broadcast(a, b)
    diff = b.data - a.data  # broadcast; must be < 0 everywhere
    if np.any(diff >= 0):
        raise DomainError("log_sub_exp requires a > b elementwise")
    one_minus_t = -np.expm1(diff)  # 1 - e^(b-a), in (0, 1]
    out_data = a.data + np.log(one_minus_t)
    a_shape, b_shape = a.data.shape, b.data.shape

    def backward_rule(g):
        ga = g / one_minus_t
        gb = -g * np.exp(diff) / one_minus_t
        return _unbroadcast(ga, a_shape), _unbroadcast(gb, b_shape)

    return _apply((a, b), out_data, backward_rule)


def min_const(x, c):
    """Elementwise min(x, c); gradient passes only where x < c (tie -> 0)."""
    x_data = x.data
    mask = x_data < c

    def backward_rule(g):
        return (g * mask,)

    return _apply((x,), np.minimum(x_data, c), backward_rule)


def max_const(x, c):
    """Elementwise max(x, c); gradient passes only where x > c (tie -> 0)."""
    x_data = x.data
    mask = x_data > c

    def backward_rule(g):
        return (g * mask,)

    return _apply((x,), np.maximum(x_data, c), backward_rule)


def relu(x):
    return max_const(x, 0.0)


def max_over_cols(x):
    """Per-row maximum as an (m, 1) column; ties route the gradient to
    the lowest column index."""
    x_data = x.data
    idx = np.argmax(x_data, axis=1)

    def backward_rule(g):
        gx = np.zeros_like(x_data)
        gx[np.arange(x_data.shape[0]), idx] = g[:, 0]
        return (gx,)

    return _apply((x,), x_data.max(axis=1, keepdims=True), backward_rule)


def sum_over_cols(x):
    x_shape = x.data.shape

    def backward_rule(g):
        return (np.broadcast_to(g, x_shape).copy(),)

    return _apply((x,), x.data.sum(axis=1, keepdims=True), backward_rule)


def sum_all(x):
    x_shape = x.data.shape

    def backward_rule(g):
        return (np.full(x_shape, g[0, 0], dtype=g.dtype),)

    return _apply((x,), x.data.sum().reshape(1, 1), backward_rule)


def mean_all(x):
    x_shape = x.data.shape
    n = x.data.size

    def backward_rule(g):
        return (np.full(x_shape, g[0, 0] / n, dtype=g.dtype),)

    return _apply((x,), x.data.mean().reshape(1, 1), backward_rule)
