"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (the attention actor, the value critic, the surrogate
losses) is built from the small op set in this module.  Operations applied to
gradient-tracked tensors are recorded on a tape; ``backward(loss)`` replays
the tape in reverse, accumulates ``grad`` on every tracked leaf reachable
from the loss, and clears the tape.

Design notes:

* float64 everywhere -- products of per-edge likelihood ratios over ~n^2
  factors need the headroom.
* tensors are immutable after creation except for gradient accumulation;
  one training step uses one tape, and independent forward passes may use
  separate tapes via :func:`use_tape`.
* ``detach`` is explicit; advantages, recorded old policies and reward
  baselines are detached before they enter any loss.
"""

from __future__ import annotations

import ctypes
import math
from contextlib import contextmanager

import numpy as np

# A training step keeps every intermediate array alive on the tape, so
# glibc's default behaviour of returning freed pages to the OS makes each
# forward pass re-fault its working set.  Raising the mmap / trim
# thresholds keeps freed blocks reusable and roughly halves step time.
try:  # glibc only; harmless to skip elsewhere
    _libc = ctypes.CDLL("libc.so.6")
    _libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    _libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
except (OSError, AttributeError):  # pragma: no cover
    pass


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A forward computation produced NaN or Inf from finite inputs."""


_grad_enabled = True
_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf validation; returns the previous setting."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


class Tape:
    """Ordered record of operations, replayed backwards to get gradients."""

    def __init__(self):
        self.records = []

    def append(self, record):
        self.records.append(record)

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


_active_tape = Tape()


@contextmanager
def use_tape(tape: Tape):
    """Make ``tape`` the recording target within the context."""
    global _active_tape
    previous = _active_tape
    _active_tape = tape
    try:
        yield tape
    finally:
        _active_tape = previous


def active_tape() -> Tape:
    return _active_tape


@contextmanager
def no_grad():
    """Disable tape recording; outputs inside do not track gradients."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tensor:
    """A dense float64 array, optionally tracking gradients.

    ``grad`` is populated (for leaves) by :func:`backward` and has the same
    shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._leaf = True

    # -- construction helpers -------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = data
        t.requires_grad = True
        t.grad = None
        t._leaf = False
        return t

    # -- introspection ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    # -- autodiff --------------------------------------------------------

    def detach(self) -> "Tensor":
        """A gradient-stopped view of the same values."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._leaf = True
        return t

    def backward(self):
        backward(self)

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
            raise DimensionError("tensor/tensor division is not provided; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        axes = list(range(self.data.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def clip(self, lo, hi):
        return clip(self, lo, hi)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)


def _scalar_error(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.data.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _check_finite(data: np.ndarray, op: str):
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{op}'")


def _record(op: str, inputs, out_data: np.ndarray, backward_fn,
            check_finite: bool = True) -> Tensor:
    # bounded nonlinearities and pure shape ops cannot produce non-finite
    # values from finite inputs, so they skip the check
    if check_finite:
        _check_finite(out_data, op)
    tracked = _grad_enabled and any(t.requires_grad for t in inputs)
    if not tracked:
        out = Tensor.__new__(Tensor)
        out.data = out_data
        out.requires_grad = False
        out.grad = None
        out._leaf = True
        return out
    out = Tensor._from_op(out_data)
    _active_tape.append(_Record(tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise binary ops ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as err:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from err

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as err:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}") from err

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as err:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from err

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), out, bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul requires operands with ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", (a, b), out, bwd)


# -- shape ops ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _record("reshape", (a,), out, bwd, check_finite=False)


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inverse = [0] * len(axes)
    for position, axis in enumerate(axes):
        inverse[axis] = position
    inverse = tuple(inverse)

    def bwd(g):
        return (np.transpose(g, inverse),)

    return _record("transpose", (a,), out, bwd, check_finite=False)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), out, bwd, check_finite=False)


# -- reductions ------------------------------------------------------------


def _reduce_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _reduce_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes)

    def bwd(g):
        expanded = g
        for ax in sorted(axes):
            expanded = np.expand_dims(expanded, ax)
        return (np.broadcast_to(expanded, a.data.shape),)

    return _record("sum", (a,), out, bwd)


def tmean(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    axes = _reduce_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.mean(axis=axes)
    inv = 1.0 / count

    def bwd(g):
        expanded = g * inv
        for ax in sorted(axes):
            expanded = np.expand_dims(expanded, ax)
        return (np.broadcast_to(expanded, a.data.shape),)

    return _record("mean", (a,), out, bwd)


# -- nonlinearities ---------------------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (a,), out, bwd, check_finite=False)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (a,), out, bwd, check_finite=False)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _record("relu", (a,), out, bwd, check_finite=False)


def _reduce_last(x: np.ndarray, ufunc) -> np.ndarray:
    """keepdims reduction over the last axis; chained ufunc calls beat
    numpy's native small-axis reduction by an order of magnitude here."""
    width = x.shape[-1]
    if width > 32:
        return ufunc.reduce(x, axis=-1, keepdims=True)
    acc = x[..., 0].copy()
    for i in range(1, width):
        ufunc(acc, x[..., i], out=acc)
    return acc[..., None]


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    axis = axis % a.data.ndim
    last = axis == a.data.ndim - 1
    if last:
        shifted = a.data - _reduce_last(a.data, np.maximum)
        ez = np.exp(shifted)
        out = ez / _reduce_last(ez, np.add)
    else:
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        ez = np.exp(shifted)
        out = ez / ez.sum(axis=axis, keepdims=True)

    def bwd(g):
        prod = g * out
        dot = _reduce_last(prod, np.add) if last else prod.sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", (a,), out, bwd, check_finite=False)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _record("log", (a,), out, bwd)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record("exp", (a,), out, bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero outside the interval."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    passthrough = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        return (g * passthrough,)

    return _record("clip", (a,), out, bwd, check_finite=False)


def custom_op(name: str, inputs, out_data: np.ndarray, backward_fn,
              check_finite: bool = True) -> Tensor:
    """Record a hand-fused operation.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input,
    each matching that input's shape.
    """
    return _record(name, tuple(_as_tensor(t) for t in inputs), out_data,
                   backward_fn, check_finite)


# -- backward pass -----------------------------------------------------------


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every tracked leaf.

    The active tape is consumed: records are replayed newest-first and the
    tape is cleared afterwards.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    tape = _active_tape
    if not tape.records:
        raise ValueError("backward on an empty tape")

    pending = {id(loss): np.ones_like(loss.data)}
    for record in reversed(tape.records):
        g_out = pending.pop(id(record.output), None)
        if g_out is None:
            continue
        grads = record.backward(g_out)
        for t, g in zip(record.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t._leaf:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += g
            else:
                acc = pending.get(id(t))
                pending[id(t)] = g if acc is None else acc + g
    tape.clear()


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam with bias correction over a named set of parameters.

    ``step`` applies one update from the accumulated ``grad`` fields and
    zeroes them; calling it with any gradient missing is a contract error.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if isinstance(params, dict):
            self.params = list(params.values())
        else:
            self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ValueError("Adam.step with a missing gradient; run backward first")
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Trainable tensor initialised uniformly in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
