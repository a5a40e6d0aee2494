"""Dense tensors with a define-by-run reverse-mode tape.

Every op computes its forward value eagerly with numpy (float64).  When a
:class:`Tape` is active and at least one operand requires a gradient, the op
appends a node holding a backward closure; :func:`backward` walks those nodes
in reverse.  Without an active tape the ops are plain numpy and record nothing,
which is what evaluation uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class BackwardError(RuntimeError):
    pass


class Tensor:
    """An n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


class Node:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op, inputs, out, backward_fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of the ops executed while it is active.

    Use as a context manager; tapes do not nest across threads because the
    active tape is thread-local.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, out, backward_fn):
        self.nodes.append(Node(op, inputs, out, backward_fn))
        self._produced.add(id(out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, value, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(value)
    out = Tensor(value, requires_grad=True)
    tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("subtract", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("multiply", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result("divide", out, (a, b), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def softplus(x) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return _result("softplus", out, (x,), lambda g: (g * _sigmoid(x.data),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax(axis={axis})", x.shape)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (x,), bw)


def power(base, exponent) -> Tensor:
    """base ** exponent for base >= 0.

    The exponent may be a tensor broadcastable against the base.  Wherever the
    base is exactly zero both partial derivatives are taken as 0.
    """
    base, exponent = as_tensor(base), as_tensor(exponent)
    _broadcast_shape("power", base, exponent)
    b, p = base.data, exponent.data
    out = b ** p

    def bw(g):
        pos = b > 0
        safe = np.where(pos, b, 1.0)
        gb = np.where(pos, g * p * safe ** (p - 1.0), 0.0)
        gp = np.where(pos, g * out * np.log(safe), 0.0)
        return _unbroadcast(gb, base.shape), _unbroadcast(gp, exponent.shape)

    return _result("power", out, (base, exponent), bw)


def clip(x, lo: float, hi: float) -> Tensor:
    """Elementwise clamp; the gradient passes where lo <= x <= hi."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)
    return _result("clip", out, (x,), lambda g: (g * inside,))


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).data)


# ---------------------------------------------------------------------------
# structural ops


def matmul(a, b) -> Tensor:
    """numpy.matmul semantics, including batched and broadcast operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", out, (a, b), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat(axis={axis})", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", out, tuple(ts), bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack(axis={axis})", *[t.shape for t in ts]) from None

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result("stack", out, tuple(ts), bw)


def slice_(x, index) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis and None."""
    x = as_tensor(x)
    try:
        out = x.data[index]
    except IndexError:
        raise ShapeError(f"slice[{index!r}]", x.shape) from None

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result("slice", out, (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape{tuple(shape)}", x.shape) from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to{tuple(shape)}", x.shape) from None
    return _result("broadcast", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is not None:
        axes = axis if isinstance(axis, tuple) else (axis,)
        if any(not -x.ndim <= ax < x.ndim for ax in axes):
            raise ShapeError(f"sum(axis={axis})", x.shape)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", out, (x,), bw)


def l2_norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is 0."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"l2_norm(axis={axis})", x.shape)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    out = n if keepdims else np.squeeze(n, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        scale = np.divide(g, n, out=np.zeros(np.broadcast_shapes(g.shape, n.shape)), where=n > 0)
        return (scale * x.data,)

    return _result("l2_norm", out, (x,), bw)


def circular_convolve_1d(w, s) -> Tensor:
    """Rotate-and-mix a weighting by a shift kernel, indices modulo N.

    ``w`` has shape (..., N) and ``s`` shape (..., K) with K odd; kernel slot
    ``j`` carries offset ``j - (K - 1) // 2``, so the result is
    ``out[i] = sum_j s[j] * w[(i - offset_j) mod N]``.
    """
    w, s = as_tensor(w), as_tensor(s)
    n, k = w.shape[-1], s.shape[-1]
    if k % 2 == 0 or k > n:
        raise ShapeError("circular_convolve_1d", w.shape, s.shape)
    try:
        np.broadcast_shapes(w.shape[:-1], s.shape[:-1])
    except ValueError:
        raise ShapeError("circular_convolve_1d", w.shape, s.shape) from None
    half = (k - 1) // 2
    offsets = range(-half, half + 1)
    rolled = [np.roll(w.data, off, axis=-1) for off in offsets]
    out = sum(s.data[..., j:j + 1] * r for j, r in enumerate(rolled))

    def bw(g):
        gw = sum(np.roll(s.data[..., j:j + 1] * g, -off, axis=-1) for j, off in enumerate(offsets))
        gs = np.stack([(g * r).sum(axis=-1) for r in rolled], axis=-1)
        return _unbroadcast(gw, w.shape), _unbroadcast(gs, s.shape)

    return _result("circular_convolve_1d", out, (w, s), bw)


def bce_with_logits(logits, targets, weights) -> Tensor:
    """Sum of ``weights * BCE(sigmoid(logits), targets)`` as a scalar.

    Uses max(z, 0) - z*y + log(1 + exp(-|z|)); targets and weights are constants.
    """
    z = as_tensor(logits)
    y = np.asarray(targets, dtype=DTYPE)
    m = np.asarray(weights, dtype=DTYPE)
    if np.broadcast_shapes(y.shape, m.shape) != z.shape:
        raise ShapeError("bce_with_logits", z.shape, y.shape, m.shape)
    zd = z.data
    per = np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    out = np.asarray((m * per).sum())

    def bw(g):
        return (g * m * (_sigmoid(zd) - y),)

    return _result("bce_with_logits", out, (z,), bw)


# ---------------------------------------------------------------------------


class Gradients(dict):
    """Parameter name -> gradient array with the parameter's shape."""

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float((g * g).sum()) for g in self.values())))


def backward(tape: Tape, loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor]) -> Gradients:
    """d(loss)/d(param) for each parameter, zeros for ones the loss never touched."""
    if isinstance(params, Mapping):
        named = dict(params)
    else:
        named = {p.name: p for p in params}
    if loss.data.size != 1:
        raise BackwardError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise BackwardError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi

    out = Gradients()
    for name, p in named.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(p.shape)
    return out
