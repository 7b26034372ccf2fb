"""Small reverse-mode autodiff over dense float64 arrays.

Every array is treated as a stack of matrices: the last two axes are the
matrix, any leading axes are batch axes that broadcast the usual numpy way.
Operations executed while a :class:`Tape` is active are recorded and
:meth:`Tape.backward` replays them in exact reverse order.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class DimensionError(AutodiffError, ValueError):
    pass


class NumericError(AutodiffError, FloatingPointError):
    pass


class DomainError(AutodiffError, ValueError):
    pass


class ConfigurationError(AutodiffError, ValueError):
    pass


class TapeError(AutodiffError, RuntimeError):
    pass


_state = threading.local()


def _tapes() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tapes()
    return stack[-1] if stack else None


class Value:
    """A float64 matrix (or stack of matrices) that can carry a gradient."""

    __slots__ = ("data", "_grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        self.data = arr
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single entry, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        # never mutate in place: the same array may be handed to several inputs
        self._grad = g if self._grad is None else self._grad + g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def constant(data) -> Value:
    return Value(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Value:
    return Value(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Tape:
    """Ordered record of the operations executed in one forward pass."""

    def __init__(self):
        self.nodes: list[tuple[Value, tuple[Value, ...], Callable]] = []
        self.visited: list[Value] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, out: Value, inputs: tuple[Value, ...], backward: Callable) -> None:
        if self._consumed:
            raise TapeError("tape already replayed; start a new tape for a new forward pass")
        self.nodes.append((out, inputs, backward))

    def backward(self, loss: Value, seed: np.ndarray | None = None) -> None:
        if self._consumed:
            raise TapeError("backward called twice on the same tape")
        self._consumed = True
        if not loss.requires_grad:
            return
        loss._grad = np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=np.float64)
        for out, inputs, backward in reversed(self.nodes):
            if out._grad is None:
                continue
            self.visited.append(out)
            grads = backward(out._grad)
            for inp, g in zip(inputs, grads):
                if g is not None and inp.requires_grad:
                    inp._accumulate(g)


def _make(data: np.ndarray, inputs: Sequence[Value], backward: Callable, op: str) -> Value:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")
    needs = any(v.requires_grad for v in inputs)
    out = Value.__new__(Value)
    out.data = data
    out._grad = None
    out.requires_grad = needs
    out.name = None
    if needs:
        tape = current_tape()
        if tape is not None:
            tape.record(out, tuple(inputs), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------- elementwise


def add(a: Value, b: Value) -> Value:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Value, b: Value) -> Value:
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a: Value, b: Value) -> Value:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(data, (a, b), backward, "mul")


def scale(x: Value, c: float) -> Value:
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Value) -> Value:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


@contextmanager
def freeze_detached(record: list, replay: bool):
    """Record (``replay=False``) or replay the values produced by
    ``stop_gradient`` in call order. Replaying holds every detached value at
    its recorded value, which is the function the backward pass differentiates."""
    prev = getattr(_state, "detached", None)
    _state.detached = (record, replay, [0])
    try:
        yield
    finally:
        _state.detached = prev


def stop_gradient(x: Value) -> Value:
    """Identity forward; nothing flows back to ``x``."""
    out = Value.__new__(Value)
    data = x.data
    frozen = getattr(_state, "detached", None)
    if frozen is not None:
        record, replay, counter = frozen
        if replay:
            data = record[counter[0]]
            if data.shape != x.shape:
                raise TapeError("detached value replay out of step with the recording")
            counter[0] += 1
        else:
            record.append(data.copy())
    out.data = data
    out._grad = None
    out.requires_grad = False
    out.name = None
    return out


# ---------------------------------------------------------------- matrices


def matmul(a: Value, b: Value) -> Value:
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # batch of rows times one matrix: fold the batch axes into one GEMM
        k = ad.shape[-1]
        a2 = ad.reshape(-1, k)
        data = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def backward_folded(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(data, (a, b), backward_folded, "matmul")
    try:
        data = ad @ bd
    except ValueError as exc:
        raise DimensionError(f"matmul batch axes differ: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ _swap(bd), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(_swap(ad) @ g, bd.shape)
        return ga, gb

    return _make(data, (a, b), backward, "matmul")


def transpose(x: Value) -> Value:
    return _make(_swap(x.data), (x,), lambda g: (_swap(g),), "transpose")


def reshape(x: Value, shape: tuple) -> Value:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def softmax_rows(x: Value) -> Value:
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), backward, "softmax_rows")


def log_softmax_rows(x: Value) -> Value:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax_rows")


def concat_channels(xs: Sequence[Value]) -> Value:
    if not xs:
        raise DimensionError("concat_channels needs at least one input")
    lead = xs[0].shape[:-1]
    for v in xs[1:]:
        if v.shape[:-1] != lead:
            raise DimensionError(f"concat_channels row mismatch: {xs[0].shape} vs {v.shape}")
    if len(xs) == 1:
        return xs[0]
    widths = [v.shape[-1] for v in xs]
    cuts = np.cumsum(widths)[:-1]
    data = np.concatenate([v.data for v in xs], axis=-1)
    return _make(data, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=-1)), "concat_channels")


def split_heads(x: Value, heads: int) -> Value:
    """(..., T, D) -> (..., heads, T, D // heads)."""
    *lead, t, d = x.shape
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    data = np.swapaxes(x.data.reshape(*lead, t, heads, dh), -2, -3)

    def backward(g):
        return (np.swapaxes(g, -2, -3).reshape(*lead, t, d),)

    return _make(data, (x,), backward, "split_heads")


def merge_heads(x: Value) -> Value:
    *lead, h, t, dh = x.shape
    data = np.swapaxes(x.data, -2, -3).reshape(*lead, t, h * dh)

    def backward(g):
        return (np.swapaxes(g.reshape(*lead, t, h, dh), -2, -3),)

    return _make(data, (x,), backward, "merge_heads")


def take_rows(x: Value, idx) -> Value:
    """Gather rows along the time axis with one index array shared by every
    leading batch entry: (..., T, D) with idx of shape S -> (..., *S, D)."""
    idx = np.asarray(idx, dtype=np.intp)
    *lead, t, d = x.shape
    flat = idx.reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() >= t):
        raise DimensionError(f"row index out of range for length {t}")
    data = x.data[..., flat, :].reshape(*lead, *idx.shape, d)
    scatter = np.zeros((t, flat.size))
    scatter[flat, np.arange(flat.size)] = 1.0

    def backward(g):
        return (scatter @ g.reshape(*lead, flat.size, d),)

    return _make(data, (x,), backward, "take_rows")


def gather_rows(x: Value, idx) -> Value:
    """Per-batch row gather: x (B, T, D), idx (B, n) -> (B, n, D)."""
    idx = np.asarray(idx, dtype=np.intp)
    b, t, d = x.shape
    if idx.ndim != 2 or idx.shape[0] != b:
        raise DimensionError(f"gather_rows index shape {idx.shape} does not match batch {b}")
    data = np.take_along_axis(x.data, idx[..., None], axis=1)
    onehot = np.zeros((b, idx.shape[1], t))
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=2)

    def backward(g):
        return (_swap(onehot) @ g,)

    return _make(data, (x,), backward, "gather_rows")


def select_entries(x: Value, idx) -> Value:
    """Pick one column per row: x (..., m, n), idx (..., m) -> (..., m, 1)."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"select_entries index shape {idx.shape} vs {x.shape}")
    data = np.take_along_axis(x.data, idx[..., None], axis=-1)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx[..., None], g, axis=-1)
        return (gx,)

    return _make(data, (x,), backward, "select_entries")


def conv1d_temporal(x: Value, kernel: Value) -> Value:
    """Same-padded cross-correlation along the time axis.

    x is (..., T, D_in), kernel is (w, D_in, D_out) with w odd.
    """
    w = kernel.shape[0]
    if kernel.data.ndim != 3:
        raise DimensionError(f"kernel must be (w, D_in, D_out), got {kernel.shape}")
    if w % 2 == 0:
        raise ConfigurationError(f"conv kernel width must be odd, got {w}")
    if x.shape[-1] != kernel.shape[1]:
        raise DimensionError(f"conv input width {x.shape[-1]} != kernel width {kernel.shape[1]}")
    half = (w - 1) // 2
    t = x.shape[-2]
    pad = [(0, 0)] * (x.data.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad)
    k = kernel.data
    data = sum(xp[..., tap:tap + t, :] @ k[tap] for tap in range(w))

    def backward(g):
        gx = gk = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for tap in range(w):
                gp[..., tap:tap + t, :] += g @ k[tap].T
            gx = gp[..., half:half + t, :]
        if kernel.requires_grad:
            din = xp.shape[-1]
            g2 = g.reshape(-1, g.shape[-1])
            gk = np.stack([xp[..., tap:tap + t, :].reshape(-1, din).T @ g2 for tap in range(w)])
        return gx, gk

    return _make(data, (x, kernel), backward, "conv1d_temporal")


def layer_norm(x: Value, gain: Value, bias: Value, eps: float = 1e-5) -> Value:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------- reductions


def sum_all(x: Value) -> Value:
    shape = x.shape
    return _make(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g.item()),), "sum_all")


def mean_all(x: Value) -> Value:
    shape, n = x.shape, x.data.size
    return _make(np.array([[x.data.mean()]]), (x,),
                 lambda g: (np.full(shape, g.item() / n),), "mean_all")


def mean_time(x: Value) -> Value:
    """Average over the time (row) axis, keeping it as length 1."""
    shape, t = x.shape, x.shape[-2]
    return _make(x.data.mean(axis=-2, keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g / t, shape).copy(),), "mean_time")


# ---------------------------------------------------------------- losses


def bce_with_logits(logits: Value, labels) -> Value:
    """Elementwise binary cross-entropy on logits, softplus form."""
    y = np.broadcast_to(np.asarray(labels, dtype=np.float64), logits.shape)
    if not np.isin(y, (0.0, 1.0)).all():
        raise DomainError("BCE labels must be 0 or 1")
    z = logits.data
    if not np.isfinite(z).all():
        raise NumericError("bce_with_logits received a non-finite logit")
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return _make(loss, (logits,), lambda g: (g * (sig - y),), "bce_with_logits")


def mse(a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward(g):
        ga = g.item() * 2.0 / n * diff
        return ga, -ga

    return _make(np.array([[np.mean(diff * diff)]]), (a, b), backward, "mse")
