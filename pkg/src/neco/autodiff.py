"""Minimal dense-tensor engine with tape-based reverse-mode differentiation.

Every differentiable quantity in the package is a :class:`Tensor`.  Primitives
are registered by name with a forward function and a vector-Jacobian rule;
executing a primitive while a :class:`GradTape` is active records a node on
that tape.  ``backward`` replays the tape in reverse.

Shape rules are strict: binary elementwise primitives accept either equal
shapes or a scalar operand.  Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
SQRT_FLOOR = 1e-12

_node_ids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    """Dense real array that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype if dtype is not None else _default_dtype(data), order="C", copy=True)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr if arr.flags.c_contiguous else np.array(arr, order="C")
        t.requires_grad = requires_grad
        t.node_id = next(_node_ids)
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; all routes go through registered primitives
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _default_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return np.float64


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# --------------------------------------------------------------------------
# tape


@dataclass
class _Record:
    name: str
    out_id: int
    out_shape: tuple
    inputs: tuple  # Tensors
    vjp: Callable
    saved: object


@dataclass
class GradTape:
    """Ordered record of executed primitives.

    Use as a context manager; primitives executed inside the block whose
    inputs require gradients are appended in execution order, so the
    record list is already topologically sorted.
    """

    records: list = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[int, Tensor]:
        return backward(loss, tape=self, wrt=wrt)


def _stack() -> list:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def _active_tape() -> GradTape | None:
    s = _stack()
    return s[-1] if s else None


class no_grad:
    """Suspend recording on the current thread."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()
        return self

    def __exit__(self, *exc):
        _stack().extend(self._saved)


# --------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable  # (*arrays, **params) -> (out, saved)
    vjp: Callable  # (g, saved, *arrays, **params) -> tuple of input grads (None allowed)


PRIMITIVES: dict[str, Primitive] = {}


def register(name: str, forward: Callable, vjp: Callable) -> Primitive:
    prim = Primitive(name, forward, vjp)
    PRIMITIVES[name] = prim
    return prim


def apply_primitive(name: str, *inputs, **params) -> Tensor:
    """Run primitive ``name`` and record it on the active tape if needed."""
    prim = PRIMITIVES[name]
    ref = next((x for x in inputs if isinstance(x, Tensor)), None)
    dtype = ref.dtype if ref is not None else None
    tensors = tuple(as_tensor(x, dtype=dtype) for x in inputs)
    arrays = tuple(t.data for t in tensors)
    out, saved = prim.forward(*arrays, **params)
    needs_grad = any(t.requires_grad for t in tensors)
    tape = _active_tape()
    result = Tensor._wrap(np.asarray(out), needs_grad and tape is not None)
    if result.requires_grad:
        def vjp(g, _p=prim, _saved=saved, _arrays=arrays, _params=params):
            return _p.vjp(g, _saved, *_arrays, **_params)

        tape.records.append(_Record(name, result.node_id, result.shape, tensors, vjp, saved))
    return result


def backward(loss: Tensor, tape: GradTape | None = None, wrt: Sequence[Tensor] | None = None) -> dict[int, Tensor]:
    """Reverse pass from a scalar ``loss``.

    Returns a table from leaf node id to gradient.  Every leaf that requires
    grad and appears on the tape gets an entry (zeros when it does not reach
    the loss); leaves passed in ``wrt`` are always included.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else _active_tape()
    if tape is None or not tape.records:
        raise ValueError("backward called without a non-empty tape")

    produced = {r.out_id for r in tape.records}
    leaves: dict[int, Tensor] = {}
    for r in tape.records:
        for t in r.inputs:
            if t.requires_grad and t.node_id not in produced:
                leaves.setdefault(t.node_id, t)
    for t in wrt or ():
        leaves.setdefault(t.node_id, t)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for r in reversed(tape.records):
        g = grads.pop(r.out_id, None)
        if g is None:
            continue
        in_grads = r.vjp(g)
        for t, gi in zip(r.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.data.dtype)
            if gi.shape != t.shape:
                gi = gi.reshape(t.shape)
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gi
            else:
                grads[t.node_id] = gi

    table = {}
    for nid, leaf in leaves.items():
        g = grads.get(nid)
        table[nid] = Tensor._wrap(np.zeros_like(leaf.data) if g is None else g, False)
    return table


def grad(fn: Callable[..., Tensor], *points: Tensor) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` at ``points`` (treated as leaves) and return value and gradients."""
    leaves = [Tensor(p.data if isinstance(p, Tensor) else p, requires_grad=True) for p in points]
    with GradTape() as tape:
        out = fn(*leaves)
    table = backward(out, tape=tape, wrt=leaves)
    return float(out.data.reshape(())), [table[x.node_id].data for x in leaves]


def finite_difference_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    _, (analytic,) = grad(fn, Tensor(x0))
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = float(fn(Tensor(x0)).data.reshape(()))
            flat[i] = old - eps
            fm = float(fn(Tensor(x0)).data.reshape(()))
            flat[i] = old
            num_flat[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


# --------------------------------------------------------------------------
# shape helpers


def _binary_shape(name, a, b):
    if a.shape == b.shape or a.size == 1 and a.ndim == 0 or b.size == 1 and b.ndim == 0:
        return
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, arr):
    if arr.ndim == 0 and g.ndim > 0:
        return np.asarray(g.sum())
    return g


# --------------------------------------------------------------------------
# elementwise


def _fwd_add(a, b):
    _binary_shape("add", a, b)
    return a + b, None


register("add", _fwd_add, lambda g, s, a, b: (_reduce_to(g, a), _reduce_to(g, b)))


def _fwd_sub(a, b):
    _binary_shape("sub", a, b)
    return a - b, None


register("sub", _fwd_sub, lambda g, s, a, b: (_reduce_to(g, a), _reduce_to(-g, b)))


def _fwd_mul(a, b):
    _binary_shape("mul", a, b)
    return a * b, None


register("mul", _fwd_mul, lambda g, s, a, b: (_reduce_to(g * b, a), _reduce_to(g * a, b)))


def _fwd_div(a, b):
    _binary_shape("div", a, b)
    if np.any(b == 0):
        raise DomainError("div: zero divisor")
    return a / b, None


register("div", _fwd_div, lambda g, s, a, b: (_reduce_to(g / b, a), _reduce_to(-g * a / (b * b), b)))
register("neg", lambda a: (-a, None), lambda g, s, a: (-g,))
register("exp", lambda a: ((out := np.exp(a)), out), lambda g, out, a: (g * out,))
register("arctan", lambda a: (np.arctan(a), None), lambda g, s, a: (g / (1.0 + a * a),))
register("tanh", lambda a: ((out := np.tanh(a)), out), lambda g, out, a: (g * (1.0 - out * out),))
register("abs", lambda a: (np.abs(a), None), lambda g, s, a: (g * np.sign(a),))


def _fwd_sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out, out


register("sigmoid", _fwd_sigmoid, lambda g, out, a: (g * out * (1.0 - out),))


def _fwd_log(a):
    if np.any(np.isnan(a)) or np.any(a < 0):
        raise DomainError("log: argument has negative or NaN entries")
    clipped = np.maximum(a, LOG_FLOOR)
    return np.log(clipped), clipped


def _vjp_log(g, clipped, a):
    return (np.where(a > LOG_FLOOR, g / clipped, 0.0),)


register("log", _fwd_log, _vjp_log)


def _fwd_sqrt(a):
    if np.any(a < 0):
        raise DomainError("sqrt: negative argument")
    out = np.sqrt(np.maximum(a, SQRT_FLOOR))
    return out, out


register("sqrt", _fwd_sqrt, lambda g, out, a: (np.where(a > SQRT_FLOOR, g / (2.0 * out), 0.0),))


def _fwd_pow(a, exponent):
    return a**exponent, None


register("pow", _fwd_pow, lambda g, s, a, exponent: (g * exponent * a ** (exponent - 1),))


def _fwd_maximum(a, value):
    return np.maximum(a, value), None


register("maximum", _fwd_maximum, lambda g, s, a, value: (g * (a > value),))


def _gelu(a):
    c = np.sqrt(2.0 / np.pi)
    inner = c * (a + 0.044715 * (a * a * a))
    t = np.tanh(inner)
    return 0.5 * a * (1.0 + t), t


def _vjp_gelu(g, t, a):
    c = np.sqrt(2.0 / np.pi)
    dinner = c * (1.0 + 3 * 0.044715 * a * a)
    return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner),)


register("gelu", _gelu, _vjp_gelu)

# --------------------------------------------------------------------------
# linear algebra and structure


def _fwd_matmul(a, b):
    ok = a.ndim >= 2 and b.ndim >= 2 and a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2] and a.shape[-1] == b.shape[-2]
    if not ok and a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        ok = True
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b, None


def _vjp_matmul(g, s, a, b):
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


register("matmul", _fwd_matmul, _vjp_matmul)


def _fwd_transpose(a, axes):
    return np.transpose(a, axes), None


register("transpose", _fwd_transpose, lambda g, s, a, axes: (np.transpose(g, np.argsort(axes)),))
register("reshape", lambda a, shape: (a.reshape(shape), None), lambda g, s, a, shape: (g.reshape(a.shape),))


def _fwd_sum(a, axis, keepdims):
    return np.sum(a, axis=axis, keepdims=keepdims), None


def _vjp_sum(g, s, a, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


register("sum", _fwd_sum, _vjp_sum)


def _fwd_broadcast(a, shape):
    if a.ndim > len(shape):
        raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}")
    return np.broadcast_to(a, shape).copy(), None


def _vjp_broadcast(g, s, a, shape):
    lead = len(shape) - a.ndim
    g = g.sum(axis=tuple(range(lead))) if lead else g
    axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return (g,)


register("broadcast_to", _fwd_broadcast, _vjp_broadcast)


def _fwd_concat(*arrays, axis):
    try:
        return np.concatenate(arrays, axis=axis), None
    except ValueError as exc:
        raise ShapeError(f"concat: {[x.shape for x in arrays]}: {exc}") from None


def _vjp_concat(g, s, *arrays, axis):
    sizes = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


register("concat", _fwd_concat, _vjp_concat)


def _fwd_gather_rows(a, index):
    index = np.asarray(index)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.shape[0]} rows")
    return a[index], None


def _vjp_gather_rows(g, s, a, index):
    out = np.zeros_like(a)
    np.add.at(out, np.asarray(index), g)
    return (out,)


register("gather_rows", _fwd_gather_rows, _vjp_gather_rows)


def _fwd_take_along(a, index):
    if index.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"take_along: index shape {index.shape} vs {a.shape}")
    return np.take_along_axis(a, index, axis=-1), None


def _vjp_take_along(g, s, a, index):
    out = np.zeros_like(a)
    np.put_along_axis(out, index, g, axis=-1)  # indices within a row are distinct
    return (out,)


register("take_along", _fwd_take_along, _vjp_take_along)


def _fwd_row_normalize(a):
    norms = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    if np.any(norms == 0):
        bad = np.argwhere(norms[..., 0] == 0)[0].tolist()
        raise DomainError(f"row_normalize: zero-norm row at {bad}")
    out = a / norms
    return out, (out, norms)


def _vjp_row_normalize(g, saved, a):
    out, norms = saved
    return ((g - out * np.sum(g * out, axis=-1, keepdims=True)) / norms,)


register("row_normalize", _fwd_row_normalize, _vjp_row_normalize)


def _fwd_softmax(a):
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return out, out


def _vjp_softmax(g, out, a):
    return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


register("softmax", _fwd_softmax, _vjp_softmax)


def _fwd_linear(x, w, b=None):
    if x.shape[-1] != w.shape[0] or w.ndim != 2 or (b is not None and b.shape != (w.shape[1],)):
        shapes = (x.shape, w.shape, None if b is None else b.shape)
        raise ShapeError(f"linear: incompatible shapes {shapes}")
    out = x @ w
    if b is not None:
        out = out + b
    return out, None


def _vjp_linear(g, s, x, w, b=None):
    gx = g @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    gw = x2.T @ g2
    if b is None:
        return gx, gw
    return gx, gw, g2.sum(axis=0)


register("linear", _fwd_linear, _vjp_linear)


def _fwd_layer_norm(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _vjp_layer_norm(g, saved, x, gamma, beta, eps):
    xhat, inv = saved
    d = x.shape[-1]
    gx_hat = g * gamma
    gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * np.sum(gx_hat * xhat, -1, keepdims=True))
    g2 = g.reshape(-1, d)
    return gx, np.sum(g2 * xhat.reshape(-1, d), axis=0), g2.sum(axis=0)


register("layer_norm", _fwd_layer_norm, _vjp_layer_norm)


# --------------------------------------------------------------------------
# public functional surface


def add(a, b):
    return apply_primitive("add", a, b)


def sub(a, b):
    return apply_primitive("sub", a, b)


def mul(a, b):
    return apply_primitive("mul", a, b)


def div(a, b):
    return apply_primitive("div", a, b)


def neg(a):
    return apply_primitive("neg", a)


def exp(a):
    return apply_primitive("exp", a)


def log(a):
    """Natural log with the argument floored at ``LOG_FLOOR``."""
    return apply_primitive("log", a)


def sqrt(a):
    return apply_primitive("sqrt", a)


def arctan(a):
    return apply_primitive("arctan", a)


def tanh(a):
    return apply_primitive("tanh", a)


def sigmoid(a):
    return apply_primitive("sigmoid", a)


def abs(a):  # noqa: A001
    return apply_primitive("abs", a)


def power(a, exponent: float):
    return apply_primitive("pow", a, exponent=float(exponent))


def maximum(a, value: float):
    return apply_primitive("maximum", a, value=float(value))


def gelu(a):
    return apply_primitive("gelu", a)


def matmul(a, b):
    return apply_primitive("matmul", a, b)


def transpose(a, axes: Sequence[int] | None = None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return apply_primitive("transpose", a, axes=tuple(axes))


def reshape(a, shape):
    return apply_primitive("reshape", a, shape=tuple(shape))


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001
    return apply_primitive("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def broadcast_to(a, shape):
    return apply_primitive("broadcast_to", a, shape=tuple(shape))


def concat(tensors: Sequence, axis: int = 0):
    return apply_primitive("concat", *tensors, axis=axis)


def gather_rows(a, index):
    return apply_primitive("gather_rows", a, index=np.asarray(index, dtype=np.int64))


def take_along(a, index):
    return apply_primitive("take_along", a, index=np.asarray(index, dtype=np.int64))


def row_normalize(a):
    return apply_primitive("row_normalize", a)


def softmax(a):
    return apply_primitive("softmax", a)


def linear(x, w, b=None):
    if b is None:
        return apply_primitive("linear", x, w)
    return apply_primitive("linear", x, w, b)


def layer_norm(x, gamma, beta, eps: float = 1e-6):
    return apply_primitive("layer_norm", x, gamma, beta, eps=eps)
