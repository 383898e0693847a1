"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in numpy arrays. While a GradTape is active, every differentiable
operation appends a backward rule to it; construction order is a topological
order of the graph, so replaying the tape in reverse visits each operation
exactly once with the full upstream gradient already accumulated. Gradients
add across consumers, and broadcasting is restricted to the scalar-vs-array
case to keep the backward rules easy to audit.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, NotScalar, ShapeMismatch

_TAPES: list["GradTape"] = []


class GradTape:
    """Wengert list of recorded operations, used as a context manager."""

    def __init__(self):
        self.entries = []  # list of (output Tensor, backward callable)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False


def active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """n-d float64 array, optionally tracked for gradients.

    grad is allocated lazily and accumulates additively; zero_grad resets it.
    A tensor created outside any tape, or via detach(), never receives
    gradient contributions.
    """

    __slots__ = ("data", "grad", "requires_grad", "_rec")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.requires_grad = requires_grad
        self._rec = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise NotScalar(f"shape {self.data.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions own the backward rules
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _tracked(tape, *tensors):
    if tape is None:
        return False
    return any(t.requires_grad or t._rec for t in tensors)


def _accum(t, g):
    if not (t.requires_grad or t._rec):
        return
    if t.grad is None:
        # first contribution: copy instead of zeros-then-add
        t.grad = np.array(g, dtype=np.float64)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _emit(tape, data, bw):
    out = Tensor(data)
    out._rec = True
    tape.entries.append((out, bw))
    return out


def _binary_shapes(a, b, op):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeMismatch(f"{op}: shapes {a.data.shape} and {b.data.shape} "
                        "are neither equal nor scalar-broadcastable")


def _reduce_to(g, shape):
    # inverse of scalar broadcast: collapse the gradient back to the size-1 operand
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    data = a.data + b.data
    tape = active_tape()
    if not _tracked(tape, a, b):
        return Tensor(data)

    def bw(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(g, b.data.shape))

    return _emit(tape, data, bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    data = a.data - b.data
    tape = active_tape()
    if not _tracked(tape, a, b):
        return Tensor(data)

    def bw(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, -_reduce_to(g, b.data.shape))

    return _emit(tape, data, bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    data = a.data * b.data
    tape = active_tape()
    if not _tracked(tape, a, b):
        return Tensor(data)

    def bw(g):
        _accum(a, _reduce_to(g * b.data, a.data.shape))
        _accum(b, _reduce_to(g * a.data, b.data.shape))

    return _emit(tape, data, bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: zero divisor")
    data = a.data / b.data
    tape = active_tape()
    if not _tracked(tape, a, b):
        return Tensor(data)

    def bw(g):
        _accum(a, _reduce_to(g / b.data, a.data.shape))
        _accum(b, _reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _emit(tape, data, bw)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    data = a.data * c
    tape = active_tape()
    if not _tracked(tape, a):
        return Tensor(data)

    def bw(g):
        _accum(a, g * c)

    return _emit(tape, data, bw)


def max0(a):
    """Rectifier: max(x, 0) elementwise; subgradient 0 at x == 0."""
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)
    tape = active_tape()
    if not _tracked(tape, a):
        return Tensor(data)
    mask = a.data > 0.0

    def bw(g):
        _accum(a, g * mask)

    return _emit(tape, data, bw)


def absolute(a):
    """|x| elementwise; subgradient 0 at x == 0."""
    a = _as_tensor(a)
    data = np.abs(a.data)
    tape = active_tape()
    if not _tracked(tape, a):
        return Tensor(data)
    sign = np.sign(a.data)

    def bw(g):
        _accum(a, g * sign)

    return _emit(tape, data, bw)


def sigmoid(a):
    a = _as_tensor(a)
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    data[~pos] = ex / (1.0 + ex)
    tape = active_tape()
    if not _tracked(tape, a):
        return Tensor(data)

    def bw(g):
        _accum(a, g * data * (1.0 - data))

    return _emit(tape, data, bw)


def softplus(a):
    """log(1 + e^x), the strictly positive smooth rectifier."""
    a = _as_tensor(a)
    data = np.logaddexp(0.0, a.data)
    tape = active_tape()
    if not _tracked(tape, a):
        return Tensor(data)

    def bw(g):
        sig = np.empty_like(a.data)
        pos = a.data >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        ex = np.exp(a.data[~pos])
        sig[~pos] = ex / (1.0 + ex)
        _accum(a, g * sig)

    return _emit(tape, data, bw)


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)
    tape = active_tape()
    if not _tracked(tape, a):
        return Tensor(data)

    def bw(g):
        _accum(a, g * data)

    return _emit(tape, data, bw)


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    data = np.log(a.data)
    tape = active_tape()
    if not _tracked(tape, a):
        return Tensor(data)

    def bw(g):
        _accum(a, g / a.data)

    return _emit(tape, data, bw)


_UNARY = {"max0": max0, "sigmoid": sigmoid, "exp": exp, "log": log, "abs": absolute}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind, a, b=None):
    """Dispatch a pointwise operation by name.

    Binary kinds and "scale" require b; "scale" treats b as a plain number.
    """
    if op_kind == "scale":
        if b is None:
            raise DomainError("scale needs a constant factor")
        return scale(a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise DomainError(f"{op_kind} is unary")
        return _UNARY[op_kind](a)
    if op_kind in _BINARY:
        if b is None:
            raise DomainError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    raise DomainError(f"unknown elementwise kind {op_kind!r}")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data
    tape = active_tape()
    if not _tracked(tape, a, b):
        return Tensor(data)

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _emit(tape, data, bw)


def tsum(a):
    """Sum of all entries; returns a scalar tensor."""
    a = _as_tensor(a)
    data = np.asarray(a.data.sum())
    tape = active_tape()
    if not _tracked(tape, a):
        return Tensor(data)

    def bw(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _emit(tape, data, bw)


def softmax(a, axis):
    a = _as_tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeMismatch(f"softmax: axis {axis} out of bounds for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    tape = active_tape()
    if not _tracked(tape, a):
        return Tensor(data)

    def bw(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - inner))

    return _emit(tape, data, bw)


def reshape(a, shape):
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    tape = active_tape()
    if not _tracked(tape, a):
        return Tensor(data)
    orig = a.data.shape

    def bw(g):
        _accum(a, g.reshape(orig))

    return _emit(tape, data, bw)


def permute(a, axes):
    a = _as_tensor(a)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeMismatch(f"permute: axes {axes} invalid for ndim {a.data.ndim}")
    data = np.transpose(a.data, axes).copy()
    tape = active_tape()
    if not _tracked(tape, a):
        return Tensor(data)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, np.transpose(g, inverse))

    return _emit(tape, data, bw)


def concat(tensors, axis=0):
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatch("concat: empty input list")
    nd = ts[0].data.ndim
    for t in ts:
        if t.data.ndim != nd:
            raise ShapeMismatch("concat: rank mismatch")
        for ax in range(nd):
            if ax != axis and t.data.shape[ax] != ts[0].data.shape[ax]:
                raise ShapeMismatch("concat: non-concat extents differ")
    data = np.concatenate([t.data for t in ts], axis=axis)
    tape = active_tape()
    if not _tracked(tape, *ts):
        return Tensor(data)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * nd
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _emit(tape, data, bw)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    a = _as_tensor(a)
    if not 0 <= axis < a.data.ndim:
        raise ShapeMismatch(f"narrow: axis {axis} invalid")
    if start < 0 or length < 1 or start + length > a.data.shape[axis]:
        raise ShapeMismatch(f"narrow: window [{start}, {start + length}) exceeds "
                            f"extent {a.data.shape[axis]}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = a.data[sl].copy()
    tape = active_tape()
    if not _tracked(tape, a):
        return Tensor(data)

    def bw(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _accum(a, full)

    return _emit(tape, data, bw)


def take_per_row(a, idx):
    """out[i, j] = a[i, idx[i, j]] for a 2-d tensor and integer index matrix."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 2 or idx.shape[0] != a.data.shape[0]:
        raise ShapeMismatch(f"take_per_row: values {a.data.shape}, indices {idx.shape}")
    if idx.min() < 0 or idx.max() >= a.data.shape[1]:
        raise ShapeMismatch("take_per_row: index out of range")
    rows = np.arange(a.data.shape[0])[:, None]
    data = a.data[rows, idx]
    tape = active_tape()
    if not _tracked(tape, a):
        return Tensor(data)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (np.broadcast_to(rows, idx.shape), idx), g)
        _accum(a, full)

    return _emit(tape, data, bw)


def backward(loss):
    """Assign d(loss)/d(leaf) to every gradient-tracked tensor on the active tape."""
    if not isinstance(loss, Tensor):
        raise NotScalar("backward expects a Tensor")
    if loss.data.size != 1:
        raise NotScalar(f"loss has {loss.data.size} elements")
    tape = active_tape()
    if tape is None or not tape.entries:
        raise RuntimeError("backward called with no recorded operations")
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for out, bw in reversed(tape.entries):
        if out.grad is None:
            continue
        bw(out.grad)
