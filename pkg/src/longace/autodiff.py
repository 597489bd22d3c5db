"""Dense-tensor reverse-mode automatic differentiation.

Small numpy-backed engine: each op builds a graph node holding the forward
value, its parent nodes, and a closure that pushes the output adjoint back
to the parents. `backward`/`grad` replay the tape (topological order) once.

All data is float64. Every op checks its output for NaN/Inf and aborts with
the offending op and node id; the estimators depend on finite losses, so
silent clamping is not an option.
"""

import itertools
import math

import numpy as np

_uid = itertools.count()


class NumericError(RuntimeError):
    """A forward op produced NaN or Inf."""


def _all_finite(arr):
    # one reduction instead of isfinite().all(); a NaN/Inf anywhere
    # poisons the sum (values large enough to overflow the sum do not
    # occur in finite, well-scaled graphs)
    return math.isfinite(float(arr.sum()))


class Tensor:
    """Node in the computation graph.

    `data` is always a float64 ndarray (scalars become 0-d arrays). Leaves
    created with `requires_grad=True` are trainable parameters; everything
    else either came from data (constant) or from an op.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "uid", "_parents", "_push")

    def __init__(self, data, requires_grad=False, _parents=(), _push=None, op="leaf"):
        self.uid = next(_uid)
        if not (isinstance(data, np.ndarray) and data.dtype == np.float64):
            data = np.asarray(data, dtype=np.float64)
        if not _all_finite(data):
            raise NumericError(f"non-finite values out of op '{op}' (node {self.uid})")
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = _parents
        self._push = _push

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, uid={self.uid})"

    # operator sugar; constants are lifted automatically
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data):
    """Wrap raw data as a non-trainable graph leaf."""
    return Tensor(data)


def parameter(data):
    """Wrap raw data as a trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _node(data, parents, push, op):
    return Tensor(data, _parents=parents, _push=push, op=op)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    def push(g, acc):
        acc(a, _unbroadcast(g, a.data.shape))
        acc(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), push, "add")


def sub(a, b):
    def push(g, acc):
        acc(a, _unbroadcast(g, a.data.shape))
        acc(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), push, "sub")


def mul(a, b):
    def push(g, acc):
        acc(a, _unbroadcast(g * b.data, a.data.shape))
        acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), push, "mul")


def div(a, b):
    def push(g, acc):
        acc(a, _unbroadcast(g / b.data, a.data.shape))
        acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(a.data / b.data, (a, b), push, "div")


def matmul(a, b):
    def push(g, acc):
        acc(a, g @ b.data.T)
        acc(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), push, "matmul")


def square(a):
    def push(g, acc):
        acc(a, g * 2.0 * a.data)

    return _node(a.data * a.data, (a,), push, "square")


def exp(a):
    out = np.exp(a.data)

    def push(g, acc):
        acc(a, g * out)

    return _node(out, (a,), push, "exp")


def log(a):
    def push(g, acc):
        acc(a, g / a.data)

    return _node(np.log(a.data), (a,), push, "log")


def tanh(a):
    out = np.tanh(a.data)

    def push(g, acc):
        acc(a, g * (1.0 - out * out))

    return _node(out, (a,), push, "tanh")


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))

    def push(g, acc):
        acc(a, g * out * (1.0 - out))

    return _node(out, (a,), push, "sigmoid")


def elu(a):
    neg = a.data < 0.0
    out = np.where(neg, np.expm1(a.data), a.data)

    def push(g, acc):
        acc(a, g * np.where(neg, out + 1.0, 1.0))

    return _node(out, (a,), push, "elu")


def clip(a, lo, hi):
    """Clamp values; gradient passes only where the clamp is inactive."""
    inside = (a.data >= lo) & (a.data <= hi)

    def push(g, acc):
        acc(a, g * inside)

    return _node(np.clip(a.data, lo, hi), (a,), push, "clip")


def concat(tensors, axis=-1):
    tensors = tuple(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def push(g, acc):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            acc(t, piece)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, push, "concat")


def slice_cols(a, lo, hi):
    """Columns [lo, hi) of a 2-D tensor."""

    def push(g, acc):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        acc(a, full)

    return _node(a.data[:, lo:hi], (a,), push, "slice_cols")


def slice_rows(a, lo, hi):
    """Rows [lo, hi) along the leading axis."""

    def push(g, acc):
        full = np.zeros_like(a.data)
        full[lo:hi] = g
        acc(a, full)

    return _node(a.data[lo:hi], (a,), push, "slice_rows")


def stack_cols(tensors):
    """Stack (batch,) tensors into a (batch, len) matrix."""
    tensors = tuple(tensors)

    def push(g, acc):
        for j, t in enumerate(tensors):
            acc(t, g[:, j])

    return _node(np.stack([t.data for t in tensors], axis=1), tensors, push, "stack_cols")


def cumprod_cols(a):
    """Running products along axis 1; inputs must stay away from zero
    (the backward pass divides by them)."""
    out = np.cumprod(a.data, axis=1)

    def push(g, acc):
        acc(a, np.cumsum((g * out)[:, ::-1], axis=1)[:, ::-1] / a.data)

    return _node(out, (a,), push, "cumprod_cols")


def rev_cumsum_cols(a):
    """Suffix sums along axis 1: out[:, j] = sum_{k >= j} a[:, k]."""

    def push(g, acc):
        acc(a, np.cumsum(g, axis=1))

    return _node(np.cumsum(a.data[:, ::-1], axis=1)[:, ::-1], (a,), push, "rev_cumsum_cols")


def sum_(a, axis=None):
    def push(g, acc):
        if axis is None:
            acc(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            acc(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _node(a.data.sum(axis=axis), (a,), push, "sum")


def mean(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]

    def push(g, acc):
        if axis is None:
            acc(a, np.broadcast_to(g / n, a.data.shape).copy())
        else:
            acc(a, np.broadcast_to(np.expand_dims(g, axis) / n, a.data.shape).copy())

    return _node(a.data.mean(axis=axis), (a,), push, "mean")


def reshape(a, shape):
    def push(g, acc):
        acc(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), push, "reshape")


def stop_gradient(a):
    """Identity forward; the backward adjoint through this edge is zero."""
    return _node(a.data, (), None, "stop_gradient")


# ---------------------------------------------------------------------------
# tape and backward pass


class Tape:
    """Topologically ordered record of the graph below a root node."""

    def __init__(self, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.uid in visited:
                continue
            visited.add(node.uid)
            stack.append((node, True))
            for p in node._parents:
                if p.uid not in visited:
                    stack.append((p, False))
        self.nodes = order  # parents always precede consumers


def _accumulate(tape, loss):
    grads = {loss.uid: np.ones_like(loss.data)}

    def acc(node, g):
        if not _all_finite(g):
            raise NumericError(f"non-finite gradient into op '{node.op}' (node {node.uid})")
        if node.uid in grads:
            grads[node.uid] = grads[node.uid] + g
        else:
            grads[node.uid] = g

    for node in reversed(tape.nodes):
        g = grads.get(node.uid)
        if g is None or node._push is None:
            continue
        node._push(g, acc)
    return grads


def backward(loss):
    """Accumulate adjoints of `loss` into every reachable node's .grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = Tape(loss)
    grads = _accumulate(tape, loss)
    for node in tape.nodes:
        if node.uid in grads:
            node.grad = grads[node.uid]
    return grads


def grad(loss):
    """Gradients of a scalar loss for every trainable leaf in its graph.

    Returns a map uid -> ndarray. Parameters not reachable from the loss
    (or reachable only through stop_gradient) are absent; callers treat a
    missing entry as a zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"grad requires a scalar loss, got shape {loss.data.shape}")
    tape = Tape(loss)
    grads = _accumulate(tape, loss)
    return {n.uid: grads[n.uid] for n in tape.nodes if n.requires_grad and n.uid in grads}
