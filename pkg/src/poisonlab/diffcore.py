"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Everything trained in this package (embedding tables, the denoiser) runs
through this engine. The op vocabulary is fixed: matmul, add, mul, sub,
scale, sum, mean, relu, silu, sigmoid, softmax-lastdim, l2norm-sq, exp,
log, concat, slice. Ops executed inside a ``Tape`` context are recorded
in execution order; ``backward`` walks the tape in exact reverse order
and accumulates gradients into ``Parameter.grad``.

Broadcasting rules: add/mul/sub follow numpy broadcasting where every
differing axis has size 1 on one side; matmul is strict 2-D. All inputs
and outputs are checked finite; an op never silently produces inf/nan.
"""

from __future__ import annotations

import logging
import threading

import numpy as np

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Input shapes do not conform to the op's contract."""


class NonFiniteError(FloatingPointError):
    """An op received or produced inf/nan values."""


# per-thread, so independent trainings can run concurrently without
# interleaving their recorded ops
_TLS = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = _TLS.stack = []
    return stack


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _check_finite(op: str, role: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values in {role} (shape {arr.shape})")


class Tensor:
    """Immutable dense float64 value. Do not mutate ``.data`` in place."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite("tensor", "constructor input", arr)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _reject_item(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # operator sugar; the named functions below are the canonical op set
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _reject_item(t: Tensor):
    raise ShapeError(f"item() requires a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """Trainable leaf: carries a gradient buffer of identical shape."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64))
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self):
        self.grad.fill(0.0)


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp", "recompute")

    def __init__(self, op, inputs, output, vjp, recompute):
        self.op = op
        self.inputs = inputs          # tuple of Tensors
        self.output = output          # Tensor
        self.vjp = vjp                # grad_out -> tuple of grads per input
        self.recompute = recompute    # () -> np.ndarray, for replay


class Tape:
    """Ordered record of ops executed inside its context."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def replay(self) -> bool:
        """Re-run every recorded op on its stored inputs; True iff every
        output is reproduced bit-identically."""
        for node in self.nodes:
            fresh = node.recompute()
            if not np.array_equal(fresh, node.output.data):
                return False
        return True


def _record(op, inputs, out_data, vjp, recompute) -> Tensor:
    _check_finite(op, "output", out_data)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    stack = _tape_stack()
    if stack:
        stack[-1].nodes.append(_Node(op, tuple(inputs), out, vjp, recompute))
    return out


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- binary ops

def _binary(op, a, b, fwd, vjp_a, vjp_b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(op, a.data, b.data)
    _check_finite(op, "input 0", a.data)
    _check_finite(op, "input 1", b.data)
    out = fwd(a.data, b.data)
    def vjp(g):
        return (_unbroadcast(vjp_a(g, a.data, b.data), a.shape),
                _unbroadcast(vjp_b(g, a.data, b.data), b.shape))
    return _record(op, (a, b), out, vjp, lambda: fwd(a.data, b.data))


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not contract (strict 2-D)")
    _check_finite("matmul", "input 0", a.data)
    _check_finite("matmul", "input 1", b.data)
    out = a.data @ b.data
    def vjp(g):
        return g @ b.data.T, a.data.T @ g
    return _record("matmul", (a, b), out, vjp, lambda: a.data @ b.data)


def scale(a, c: float):
    a = _wrap(a)
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError(f"scale: non-finite scalar {c}")
    _check_finite("scale", "input", a.data)
    out = a.data * c
    return _record("scale", (a,), out, lambda g: (g * c,), lambda: a.data * c)


# ------------------------------------------------------------- reductions

def tensor_sum(a, axis=None, keepdims=False):
    a = _wrap(a)
    _check_finite("sum", "input", a.data)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=np.float64)
    def vjp(g):
        return (_spread(g, a.shape, axis, keepdims),)
    return _record("sum", (a,), out, vjp,
                   lambda: np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64))


def tensor_mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    _check_finite("mean", "input", a.data)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=np.float64)
    count = a.data.size if axis is None else a.data.shape[axis]
    def vjp(g):
        return (_spread(g, a.shape, axis, keepdims) / count,)
    return _record("mean", (a,), out, vjp,
                   lambda: np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=np.float64))


def _spread(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction gradient back to the input shape."""
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
    g = np.asarray(g)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def l2norm_sq(a, axis=None, keepdims=False):
    """Sum of squares, optionally along one axis."""
    a = _wrap(a)
    _check_finite("l2norm-sq", "input", a.data)
    out = np.asarray((a.data ** 2).sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    def vjp(g):
        return (2.0 * a.data * _spread(g, a.shape, axis, keepdims),)
    return _record("l2norm-sq", (a,), out, vjp,
                   lambda: np.asarray((a.data ** 2).sum(axis=axis, keepdims=keepdims), dtype=np.float64))


# ------------------------------------------------------------ elementwise

def _unary(op, a, fwd, vjp_fn):
    a = _wrap(a)
    _check_finite(op, "input", a.data)
    out = fwd(a.data)
    return _record(op, (a,), out, lambda g: (vjp_fn(g, a.data, out),), lambda: fwd(a.data))


def relu(a):
    return _unary("relu", a, lambda x: np.maximum(x, 0.0),
                  lambda g, x, y: g * (x > 0))


def _sigmoid_arr(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    return _unary("sigmoid", a, _sigmoid_arr,
                  lambda g, x, y: g * y * (1.0 - y))


def silu(a):
    def fwd(x):
        return x * _sigmoid_arr(x)
    def vjp(g, x, y):
        s = _sigmoid_arr(x)
        return g * (s + x * s * (1.0 - s))
    return _unary("silu", a, fwd, vjp)


def exp(a):
    return _unary("exp", a, np.exp, lambda g, x, y: g * y)


def log(a):
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log: input must be strictly positive")
    return _unary("log", a, np.log, lambda g, x, y: g / x)


def softmax_lastdim(a):
    a = _wrap(a)
    _check_finite("softmax-lastdim", "input", a.data)
    def fwd(x):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    out = fwd(a.data)
    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)
    return _record("softmax-lastdim", (a,), out, vjp, lambda: fwd(a.data))


# --------------------------------------------------------- shape plumbing

def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one input")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    for i, t in enumerate(tensors):
        _check_finite("concat", f"input {i}", t.data)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _record("concat", tuple(tensors), out, vjp,
                   lambda: np.concatenate([t.data for t in tensors], axis=axis))


def slice_axis(a, axis: int, start: int, stop: int):
    """Contiguous slice [start, stop) along one axis."""
    a = _wrap(a)
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ShapeError(f"slice: [{start}, {stop}) out of bounds for axis {axis} of shape {a.shape}")
    _check_finite("slice", "input", a.data)
    idx = [np.s_[:]] * a.data.ndim
    idx[axis] = np.s_[start:stop]
    idx = tuple(idx)
    out = a.data[idx].copy()
    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)
    return _record("slice", (a,), out, vjp, lambda: a.data[idx].copy())


# fixed op vocabulary, keyed by the canonical kind names
OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "scale": scale,
    "sum": tensor_sum,
    "mean": tensor_mean,
    "relu": relu,
    "silu": silu,
    "sigmoid": sigmoid,
    "softmax-lastdim": softmax_lastdim,
    "l2norm-sq": l2norm_sq,
    "exp": exp,
    "log": log,
    "concat": concat,
    "slice": slice_axis,
}


def forward_op(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch one op by kind name (the fixed vocabulary in ``OPS``)."""
    if kind not in OPS:
        raise KeyError(f"unknown op kind {kind!r}")
    return OPS[kind](*args, **kwargs)


# ---------------------------------------------------------------- backward

def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(param) into every Parameter on the tape.

    ``loss`` must be a single-element tensor produced on ``tape``.
    Parameters not reachable from the loss keep their current (zeroed)
    gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owner: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owner[key] = inp
    for key, g in grads.items():
        t = owner[key]
        if isinstance(t, Parameter):
            t.grad += g.reshape(t.grad.shape)


# -------------------------------------------------------------- optimizer

class Adam:
    """Standard Adam with bias correction; moment state persists across steps.

    A step with any non-finite gradient is rejected: state and parameters
    stay untouched and a warning is logged.
    """

    def __init__(self, params, lr=0.005, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self) -> bool:
        """Apply one update; returns False if rejected on non-finite grads."""
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                logger.warning("adam: non-finite gradient in %r, step rejected", p.name)
                return False
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        return True


def adam_step(params, lr=0.005, betas=(0.9, 0.999), eps=1e-8, state=None):
    """One-shot Adam update; pass the returned state back in to continue."""
    if state is None:
        state = Adam(params, lr=lr, betas=betas, eps=eps)
    state.step()
    return state
