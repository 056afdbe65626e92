"""Dense float32 tensors with reverse-mode automatic differentiation.

Operations executed while a :class:`Tape` is active are recorded as a Wengert
list; because execution order is construction order, the list is already
topologically sorted and the backward pass is a single reverse sweep that
visits each node exactly once.

Tensors are treated as immutable values once created.  Every primitive
validates that its output is finite (NaN/Inf is an error state); the check can
be suspended in hot loops with :func:`finite_checks`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "finite_checks",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "tsum",
    "tmean",
    "exp",
    "log",
    "sqrt",
    "clip",
    "sigmoid",
    "elu",
    "leaky_relu",
    "softmax",
    "log_softmax",
    "trace",
    "outer",
    "batch_norm",
]

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf values."""


# ---------------------------------------------------------------------------
# tape machinery
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []
_GRAD_ENABLED: bool = True
_FINITE_CHECKS: bool = True


class _Node:
    __slots__ = ("name", "inputs", "out", "backward")

    def __init__(self, name, inputs, out, backward):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of executed primitives; single-writer.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on a scalar result produced inside it.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self):
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def backward(self, root: "Tensor") -> None:
        """Accumulate d(root)/d(leaf) into ``grad`` of every requires_grad leaf.

        ``root`` must be a scalar produced on this tape.  Leaves recorded on
        the tape but not on a path to ``root`` receive a zero gradient buffer.
        """
        if root.size != 1:
            raise ShapeError(
                f"backward: root must be scalar, got shape {root.shape}")
        produced = {id(n.out) for n in self._nodes}
        if id(root) not in produced:
            raise ValueError("backward: root tensor is detached from this tape")

        grads: dict[int, np.ndarray] = {
            id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self._nodes):
            gout = grads.pop(id(node.out), None)
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves.setdefault(id(t), t)
            if gout is None:
                continue
            gins = node.backward(gout)
            for t, g in zip(node.inputs, gins):
                if g is None or not t.requires_grad:
                    continue
                g = g.astype(DTYPE, copy=False)
                if id(t) in produced:
                    acc = grads.get(id(t))
                    grads[id(t)] = g if acc is None else acc + g
                else:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += g
        # leaves recorded on the tape but never reached from root
        for t in leaves.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if (_TAPE_STACK and _GRAD_ENABLED) else None


@contextlib.contextmanager
def no_grad():
    """Suspend tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Enable/disable the per-primitive NaN/Inf validation inside the block."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not _FINITE_CHECKS or arr.size == 0:
        return
    lo = arr.min()
    hi = arr.max()
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise NonFiniteError(f"{name}: non-finite values in output")


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------

ArrayLike = Union[np.ndarray, float, int, Sequence]


def _as_f32(data: ArrayLike) -> np.ndarray:
    arr = np.asarray(data, dtype=DTYPE)
    return np.ascontiguousarray(arr)


class Tensor:
    """Dense f32 n-d array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, requires_grad={self.requires_grad},"
                f" data={self.data!r})")

    # -- operator sugar -----------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(name: str,
           out_data: np.ndarray,
           inputs: tuple,
           backward: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap a primitive result, validating it and recording the tape node.

    ``backward`` maps the output gradient to one gradient (or None) per input,
    in order.  Exposed so that composite kernels (convolutions, batch norm)
    defined in sibling modules can participate in the same tape.
    """
    _check_finite(name, out_data)
    req = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data if out_data.dtype == DTYPE else out_data.astype(DTYPE)
    out.grad = None
    tape = _active_tape()
    out.requires_grad = bool(req and tape is not None)
    if out.requires_grad:
        tape._nodes.append(_Node(name, inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over axes that were broadcast to reach ``grad.shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, unbroadcast on backward)
# ---------------------------------------------------------------------------

def _binary(name, a, b, fwd, bwd_a, bwd_b):
    a, b = _coerce(a), _coerce(b)
    try:
        out = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} vs {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(bwd_a(g, a.data, b.data, out), a.shape) \
            if a.requires_grad else None
        gb = _unbroadcast(bwd_b(g, a.data, b.data, out), b.shape) \
            if b.requires_grad else None
        return ga, gb

    return record(name, out, (a, b), backward)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * x / (y * y))


def neg(a):
    a = _coerce(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return record("matmul", out, (a, b), backward)


def transpose(a, axes: Optional[tuple[int, ...]] = None) -> Tensor:
    a = _coerce(a)
    if axes is None:
        if a.ndim != 2:
            raise ShapeError(f"transpose: default axes need 2-d, got {a.shape}")
        axes = (1, 0)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return record("transpose", out, (a,),
                  lambda g: (g.transpose(inv),))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _coerce(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    old = a.shape
    return record("reshape", np.ascontiguousarray(out), (a,),
                  lambda g: (g.reshape(old),))


def trace(a) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"trace: need square matrix, got {a.shape}")
    n = a.shape[0]
    out = np.array(np.trace(a.data), dtype=DTYPE)

    def backward(g):
        return (float(g) * np.eye(n, dtype=DTYPE),)

    return record("trace", out, (a,), backward)


def outer(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"outer: need vectors, got {a.shape} and {b.shape}")
    out = np.outer(a.data, b.data).astype(DTYPE)

    def backward(g):
        ga = g @ b.data if a.requires_grad else None
        gb = g.T @ a.data if b.requires_grad else None
        return ga, gb

    return record("outer", out, (a, b), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axis = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=DTYPE)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return record("sum", out, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axis = _norm_axis(axis, a.ndim)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=DTYPE)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([shape[ax] for ax in axis]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(DTYPE) / DTYPE(count),)

    return record("mean", out, (a,), backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _coerce(a)
    out = np.log(a.data)
    return record("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda g: (g * (0.5 / out),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is passed through inside the bounds."""
    a = _coerce(a)
    out = np.clip(a.data, lo, hi)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(DTYPE)
    return record("clip", out, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    out = expit(a.data)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = _coerce(a)
    x = a.data
    pos = x > 0
    out = np.minimum(x, 0.0, dtype=DTYPE)
    np.exp(out, out=out)
    # out holds e^min(x,0) here; the derivative factor (1 if x>0 else
    # alpha*e^x) reuses it before the in-place fixup to the forward value
    factor = np.where(pos, DTYPE(1.0), DTYPE(alpha) * out)
    out -= DTYPE(1.0)
    out *= DTYPE(alpha)
    np.copyto(out, x, where=pos)
    return record("elu", out, (a,), lambda g: (g * factor,))


def leaky_relu(a, negative_slope: float = 0.01) -> Tensor:
    a = _coerce(a)
    x = a.data
    out = np.where(x > 0, x, DTYPE(negative_slope) * x).astype(DTYPE)
    factor = np.where(x > 0, DTYPE(1.0), DTYPE(negative_slope))
    return record("leaky_relu", out, (a,), lambda g: (g * factor,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _coerce(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record("softmax", out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _coerce(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (a,), backward)


# ---------------------------------------------------------------------------
# batch normalization (composite with a hand-written backward)
# ---------------------------------------------------------------------------

def batch_norm(a, gamma, beta, *, mean=None, var=None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over all axes except axis 1 (the feature/channel axis).

    When ``mean``/``var`` are None the batch statistics are used and the
    gradient flows through them (training mode).  Passing precomputed running
    statistics (plain arrays) selects evaluation mode, where they are treated
    as constants.
    """
    a = _coerce(a)
    gamma, beta = _coerce(gamma), _coerce(beta)
    x = a.data
    if x.ndim < 2:
        raise ShapeError(f"batch_norm: need at least 2-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} "
            f"do not match {c} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    stat_shape = (1, c) + (1,) * (x.ndim - 2)
    use_batch_stats = mean is None
    if use_batch_stats:
        mu = x.mean(axis=axes, keepdims=True)
        v = x.var(axis=axes, keepdims=True)
    else:
        mu = np.asarray(mean, dtype=DTYPE).reshape(stat_shape)
        v = np.asarray(var, dtype=DTYPE).reshape(stat_shape)
    inv_std = 1.0 / np.sqrt(v + DTYPE(eps))
    xhat = (x - mu) * inv_std
    g_shaped = gamma.data.reshape(stat_shape)
    out = xhat * g_shaped + beta.data.reshape(stat_shape)
    n = x.size // c

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        if not a.requires_grad:
            return None, ggamma, gbeta
        gxhat = g * g_shaped
        if use_batch_stats:
            gx = (gxhat - gxhat.mean(axis=axes, keepdims=True)
                  - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)) * inv_std
        else:
            gx = gxhat * inv_std
        return gx.astype(DTYPE), ggamma, gbeta

    out_t = record("batch_norm", out.astype(DTYPE), (a, gamma, beta), backward)
    return out_t


def batch_moments(a) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel batch mean and (biased) variance as plain arrays, no grad."""
    a = _coerce(a)
    axes = (0,) + tuple(range(2, a.ndim))
    return a.data.mean(axis=axes), a.data.var(axis=axes)
