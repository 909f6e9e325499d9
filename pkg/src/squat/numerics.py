"""Dense f64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) whenever one of their inputs requires a gradient. Outside a
tape every op is a plain numpy computation.
"""
from __future__ import annotations

import contextvars
import math
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DTYPE = np.float64
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("squat_tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed operations.

    Each record is ``(output, inputs, backward_fn)`` where ``backward_fn`` maps
    the output's gradient to a tuple of input gradients (``None`` to skip).
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)


class Gradients:
    """Gradient map returned by :func:`backward`.

    Tensors never reached from the loss get an exact zero array.
    """

    def __init__(self, grads: dict[int, np.ndarray], tape: Tape):
        self._grads = grads
        self._tape = tape  # keeps ids stable

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append((out, tuple(inputs), fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor, tape: Tape) -> Gradients:
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.records):
        g = grads.get(id(out))
        if g is None:
            continue
        for inp, ig in zip(inputs, fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    return Gradients(grads, tape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    )


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    return _record(out, (x,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of x * Phi(x)."""
    v = x.data
    t = np.tanh(GELU_C * (v + GELU_A * v**3))
    out = Tensor(0.5 * v * (1.0 + t))

    def grad(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _record(out, (x,), grad)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def grad(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _record(out, (a, b), grad)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    out = Tensor(np.swapaxes(x.data, -1, -2))
    return _record(out, (x,), lambda g: (np.swapaxes(g, -1, -2),))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[rows, heads*dk] -> [heads, rows, dk]."""
    rows, width = x.shape
    if width % heads:
        raise ShapeError(f"width {width} not divisible by {heads} heads")
    dk = width // heads
    out = Tensor(x.data.reshape(rows, heads, dk).transpose(1, 0, 2))
    return _record(out, (x,), lambda g: (g.transpose(1, 0, 2).reshape(rows, width),))


def merge_heads(x: Tensor) -> Tensor:
    """[heads, rows, dk] -> [rows, heads*dk]."""
    heads, rows, dk = x.shape
    out = Tensor(x.data.transpose(1, 0, 2).reshape(rows, heads * dk))
    return _record(out, (x,), lambda g: (g.reshape(rows, heads, dk).transpose(1, 0, 2),))


# ---------------------------------------------------------------- structure

def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def grad(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, xs, grad)


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[..., start:stop])

    def grad(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _record(out, (x,), grad)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Hard row selection; gradients flow back only into the selected rows."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[idx])

    def grad(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (x,), grad)


def scatter_rows(base: Tensor, idx, rows: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``idx`` (unique) replaced by ``rows``."""
    idx = np.asarray(idx, dtype=np.intp)
    if rows.shape != (len(idx),) + base.shape[1:]:
        raise ShapeError(f"scatter_rows: rows {rows.shape} do not fit base {base.shape} at {len(idx)} positions")
    data = base.data.copy()
    data[idx] = rows.data
    out = Tensor(data)

    def grad(g):
        gb = g.copy()
        gb[idx] = 0.0
        return gb, g[idx]

    return _record(out, (base, rows), grad)


def mean_rows(x: Tensor) -> Tensor:
    m = x.shape[0]
    out = Tensor(x.data.mean(axis=0, keepdims=True))
    return _record(out, (x,), lambda g: (np.broadcast_to(g / m, x.shape).copy(),))


def repeat_rows(x: Tensor, m: int) -> Tensor:
    if x.shape[0] != 1:
        raise ShapeError(f"repeat_rows expects a single row, got {x.shape}")
    out = Tensor(np.repeat(x.data, m, axis=0))
    return _record(out, (x,), lambda g: (g.sum(axis=0, keepdims=True),))


def total(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean())
    return _record(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def stack_scalars(xs: Sequence[Tensor]) -> Tensor:
    out = Tensor(np.array([x.data for x in xs], dtype=DTYPE).reshape(len(xs)))
    return _record(out, xs, lambda g: tuple(g[i].reshape(xs[i].shape) for i in range(len(xs))))


# ---------------------------------------------------------------- normalisation

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    d = v.shape[-1]

    def grad(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv / d * (
            d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), grad)


# ---------------------------------------------------------------- losses

def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]."""
    targets = np.asarray(targets, dtype=np.intp)
    m = logits.shape[0]
    logp = log_softmax_np(logits.data)
    rows = np.arange(m)
    out = Tensor(-logp[rows, targets].mean())

    def grad(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (g / m),)

    return _record(out, (logits,), grad)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    t = np.asarray(targets, dtype=DTYPE)
    x = logits.data
    m = x.size
    out = Tensor((np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean())
    return _record(out, (logits,), lambda g: ((sigmoid_np(x) - t) * (g / m),))


# ---------------------------------------------------------------- utilities

def make_rng(seed: int, *keys: str | int) -> np.random.Generator:
    """Independent generator for ``(seed, keys...)``; the same keys give the same stream."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(str(k).encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


def central_difference(f: Callable[[], float], array: np.ndarray, indices: Iterable[int], h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``array.flat[indices]``; ``array`` is perturbed in place."""
    flat = array.reshape(-1)
    out = []
    for i in indices:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2.0 * h))
    return np.array(out, dtype=DTYPE)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=DTYPE)
    numeric = np.asarray(numeric, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
