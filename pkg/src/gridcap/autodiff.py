"""Dense float tensors with reverse-mode automatic differentiation.

Every model equation in this package is composed from the ops defined here.
A :class:`Tensor` wraps a numpy array; each op stores backward closures on
its output, and :func:`backward` replays the recorded ops in exact reverse
execution order (see :class:`GradTape`).

Storage is row-major, double precision by default.  Any op that produces a
NaN or Inf raises :class:`NonFiniteError` immediately: silent divergence is
worse than an aborted step, especially under REINFORCE-style training.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "GradTape",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "set_default_dtype",
    "default_dtype",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "exp",
    "log",
    "tsum",
    "tmean",
    "softmax",
    "log_softmax",
    "layer_norm",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "concat_last",
    "stack_rows",
    "mean_pool",
    "embedding_lookup",
    "gather_rows",
    "take_rows",
    "roll_grid",
    "dropout",
]


class ShapeError(ValueError):
    """Operands have shapes the requested op cannot accept."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from finite inputs; the step is aborted."""


_DTYPE = np.float64
_SEQ = itertools.count()
_LOCAL = threading.local()


def set_default_dtype(dtype) -> None:
    """Set the dtype newly created tensors use (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}; use float64 or float32")
    _DTYPE = dtype.type


def default_dtype():
    return _DTYPE


def _grad_enabled() -> bool:
    return getattr(_LOCAL, "grad_enabled", True)


class no_grad:
    """Context manager: ops executed inside build no backward record."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _LOCAL.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _LOCAL.grad_enabled = self._prev
        return False


class Tensor:
    """A dense real array plus an optional gradient of the same shape.

    ``requires_grad`` marks leaves that should receive gradients; outputs of
    ops are tracked automatically whenever any input is tracked and grad
    recording is enabled.
    """

    __slots__ = ("data", "grad", "requires_grad", "_pairs", "_opname", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._pairs: tuple = ()
        self._opname: str | None = None
        self._seq = next(_SEQ)

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        head = "Parameter" if isinstance(self, Parameter) else "Tensor"
        return f"{head}(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take_rows(self, idx)


class Parameter(Tensor):
    """A named leaf tensor that always participates in gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def copy_(self, values: np.ndarray) -> None:
        """Overwrite in place, keeping shape (used by checkpoint loading)."""
        values = np.asarray(values, dtype=self.data.dtype)
        if values.shape != self.data.shape:
            raise ShapeError(
                f"parameter {self.name!r} has shape {self.data.shape}, got {values.shape}"
            )
        self.data = values.copy()


class GradTape:
    """The ops reachable from a root tensor, in execution order.

    Creation stamps (`_seq`) give the exact order ops ran in; backward walks
    the record reversed, so gradients are accumulated deterministically.
    """

    __slots__ = ("record",)

    def __init__(self, record: list[Tensor]):
        self.record = record

    @classmethod
    def trace(cls, root: Tensor) -> "GradTape":
        seen: set[int] = set()
        record: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t._pairs:
                continue
            seen.add(id(t))
            record.append(t)
            for inp, _ in t._pairs:
                stack.append(inp)
        record.sort(key=lambda t: t._seq)
        return cls(record)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tracked tensor reachable from ``loss``.

    ``loss`` must be a scalar (a single element).  Gradients accumulate into
    existing ``grad`` buffers; call ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = GradTape.trace(loss)
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad = loss.grad + np.ones_like(loss.data)
    for t in reversed(tape.record):
        g = t.grad
        if g is None:
            continue
        for inp, fn in t._pairs:
            contrib = fn(g)
            if inp.grad is None:
                inp.grad = np.array(contrib, dtype=inp.data.dtype, copy=True)
            else:
                inp.grad = inp.grad + contrib


# -- op plumbing -----------------------------------------------------------


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def _result(name: str, data: np.ndarray, pairs) -> Tensor:
    data = np.asarray(data, dtype=_DTYPE)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op {name!r} produced non-finite values")
    tracked = _grad_enabled() and any(t.requires_grad for t, _ in pairs)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        out._pairs = tuple((t, fn) for t, fn in pairs if t.requires_grad)
        out._opname = name
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# -- elementwise and linear algebra ------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a @ b`` with broadcastable batch extents."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def grad_a(g):
        return _unbroadcast(g @ _swap_last(b.data), a.shape)

    def grad_b(g):
        return _unbroadcast(_swap_last(a.data) @ g, b.shape)

    return _result("matmul", data, [(a, grad_a), (b, grad_b)])


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _result(
        "add",
        a.data + b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
    )


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _result(
        "sub",
        a.data - b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))],
    )


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    return _result(
        "mul",
        a.data * b.data,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ],
    )


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _result(
        "div",
        data,
        [
            (a, lambda g: _unbroadcast(g / b.data, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        ],
    )


def neg(a) -> Tensor:
    a = _coerce(a)
    return _result("neg", -a.data, [(a, lambda g: -g)])


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0.0), [(a, lambda g: g * mask)])


def exp(a) -> Tensor:
    a = _coerce(a)
    data = np.exp(a.data)
    return _result("exp", data, [(a, lambda g: g * data)])


def log(a) -> Tensor:
    a = _coerce(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _result("log", data, [(a, lambda g: g / a.data)])


def _restore_axes(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if not keepdims:
        if axis is None:
            g = g.reshape((1,) * len(shape))
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(a % len(shape) for a in axes)
            full = list(g.shape)
            for a in sorted(axes):
                full.insert(a, 1)
            g = g.reshape(full)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    """Sum reduction (named ``tsum`` to avoid shadowing the builtin)."""
    a = _coerce(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    return _result("sum", data, [(a, lambda g: _restore_axes(g, a.shape, axis, keepdims))])


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(data.size, 1)

    def grad(g):
        return _restore_axes(g, a.shape, axis, keepdims) / count

    return _result("mean", data, [(a, grad)])


def mean_pool(a) -> Tensor:
    """Mean over rows: [m, D] -> [D]."""
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError(f"mean_pool expects a [m, D] matrix, got {a.shape}")
    return tmean(a, axis=0)


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted before exponentiation)."""
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (g - (g * data).sum(axis=axis, keepdims=True)) * data

    return _result("softmax", data, [(a, grad)])


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def grad(g):
        return g - np.exp(data) * g.sum(axis=axis, keepdims=True)

    return _result("log_softmax", data, [(a, grad)])


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _coerce(a), _coerce(gain), _coerce(bias)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    data = xhat * gain.data + bias.data

    def grad_a(g):
        gh = g * gain.data
        return inv * (
            gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )

    def grad_gain(g):
        return _unbroadcast(g * xhat, gain.shape)

    def grad_bias(g):
        return _unbroadcast(g, bias.shape)

    return _result("layer_norm", data, [(a, grad_a), (gain, grad_gain), (bias, grad_bias)])


# -- shape manipulation ------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(shape)
    return _result("reshape", a.data.reshape(shape).copy(), [(a, lambda g: g.reshape(a.shape))])


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(
        "transpose",
        a.data.transpose(axes).copy(),
        [(a, lambda g: g.transpose(inverse))],
    )


def broadcast_to(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(shape)
    return _result(
        "broadcast_to",
        np.broadcast_to(a.data, shape).copy(),
        [(a, lambda g: _unbroadcast(g, a.shape))],
    )


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def make_grad(i):
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _result("concat", data, [(t, make_grad(i)) for i, t in enumerate(tensors)])


def concat_last(a, b) -> Tensor:
    """Concatenate along the last axis."""
    return concat([a, b], axis=-1)


def stack_rows(rows) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    rows = [_coerce(r) for r in rows]
    data = np.stack([r.data for r in rows], axis=0)

    def make_grad(i):
        return lambda g: g[i]

    return _result("stack_rows", data, [(r, make_grad(i)) for i, r in enumerate(rows)])


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of ``table`` [V, D] at integer ``ids``; grads scatter back."""
    table = _coerce(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be [vocab, dim], got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])][0]
        raise IndexError(f"token id {int(bad)} outside vocabulary of size {table.shape[0]}")
    data = table.data[ids]

    def grad(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        return buf

    return _result("embedding_lookup", data, [(table, grad)])


def gather_rows(a, ids) -> Tensor:
    """Pick one entry per row: out[i] = a[i, ids[i]]."""
    a = _coerce(a)
    ids = np.asarray(ids, dtype=np.int64)
    if a.ndim != 2 or ids.ndim != 1 or ids.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows expects [n, V] and [n] ids, got {a.shape}, {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= a.shape[1]):
        raise IndexError("gather index outside the last axis")
    rows = np.arange(a.shape[0])
    data = a.data[rows, ids]

    def grad(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (rows, ids), g)
        return buf

    return _result("gather_rows", data, [(a, grad)])


def take_rows(a, idx) -> Tensor:
    """Index along axis 0 with an int, slice, or index array."""
    a = _coerce(a)
    if isinstance(idx, (list, np.ndarray)):
        idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def grad(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return buf

    return _result("take_rows", data, [(a, grad)])


def roll_grid(a, shift_h: int, shift_w: int) -> Tensor:
    """Cyclically shift the first two axes of a [H, W, ...] tensor."""
    a = _coerce(a)
    if a.ndim < 2:
        raise ShapeError(f"roll_grid needs at least two axes, got {a.shape}")
    data = np.roll(a.data, (shift_h, shift_w), axis=(0, 1))

    def grad(g):
        return np.roll(g, (-shift_h, -shift_w), axis=(0, 1))

    return _result("roll_grid", data, [(a, grad)])


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when ``rate`` is zero."""
    a = _coerce(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result("dropout", a.data * mask, [(a, lambda g: g * mask)])
