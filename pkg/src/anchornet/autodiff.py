"""A small tape-based reverse-mode autodiff over float64 numpy arrays.

Only the operations AnchorNet-T and the downstream text CNN need are here.
Ops record onto the innermost active :class:`Tape`; with no tape active they
just compute.  Every op result is checked for NaN/Inf.

    with Tape() as tape:
        loss = cross_entropy(softmax(logits), labels)
    tape.backward(loss)
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GeometryUnderflow, InvalidArgument, NumericalError, TrainingDiverged

PROB_FLOOR = 1e-12

_state = threading.local()


def _tapes() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {op}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        _check_finite(self.data, name or "tensor construction")
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


class Param(Tensor):
    """A trainable leaf; ``grad`` always has the value's shape."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class _Record:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of primitive ops; ``backward`` replays it in reverse."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)
        return False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise InvalidArgument(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            for parent, pg in zip(rec.parents, rec.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
            if not isinstance(rec.out, Param):
                rec.out.grad = None
        for rec in self.records:
            for parent in rec.parents:
                if parent.grad is not None:
                    _check_finite(parent.grad, f"gradient of {parent.name or 'tensor'}")
        self.records.clear()


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.requires_grad = any(p.requires_grad for p in parents)
    stack = _tapes()
    if out.requires_grad and stack:
        stack[-1].records.append(_Record(out, tuple(parents), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (scalar and per-channel cases)."""
    a, b = _lift(a), _lift(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


NONLINEARITIES = {"relu": relu, "tanh": tanh, "identity": lambda x: x}


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


# reductions and shape ------------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def spatial_mean(x: Tensor) -> Tensor:
    """Per-channel mean over the spatial axis of ``[..., L, C]``."""
    if x.shape[-2] < 1:
        raise InvalidArgument("spatial_mean of an empty map")
    return mean(x, axis=-2)


def tmax(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal element."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)
    return _make(out, (x,), backward, "max")


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# neural-network ops --------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _make(y, (x,), backward, "softmax")


def embedding(table: Tensor, indices, frozen_row: int | None = None) -> Tensor:
    """Row lookup ``table[indices]``; ``frozen_row`` receives no gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise InvalidArgument(f"token index out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        if frozen_row is not None:
            gt[frozen_row] = 0.0
        return (gt,)
    return _make(table.data[idx], (table,), backward, "embedding")


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Valid 1D convolution over ``x[..., L, Cin]`` with ``weight[k, Cin, Cout]``.

    ``out[t, co] = bias[co] + sum_{dt, ci} x[t + dt, ci] * weight[dt, ci, co]``.
    ``padding`` zero-pads both ends first (used by the wide-convolution
    downstream model only).
    """
    k, c_in, c_out = weight.shape
    if x.shape[-1] != c_in:
        raise InvalidArgument(f"conv1d expects {c_in} input channels, got {x.shape[-1]}")
    xd = x.data
    if padding:
        pad = [(0, 0)] * (xd.ndim - 2) + [(padding, padding), (0, 0)]
        xd = np.pad(xd, pad)
    length = xd.shape[-2]
    if length < k:
        raise GeometryUnderflow(f"conv1d input length {length} is shorter than kernel {k}")
    out_len = length - k + 1
    # windows[..., t, ci, dt] = xd[..., t + dt, ci]
    windows = sliding_window_view(xd, k, axis=-2)
    lead = xd.shape[:-2]
    cols = windows.transpose(*range(len(lead)), len(lead), len(lead) + 2, len(lead) + 1)
    flat_cols = cols.reshape(-1, k * c_in)
    out = (flat_cols @ weight.data.reshape(k * c_in, c_out)).reshape(*lead, out_len, c_out)
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        flat_g = g.reshape(-1, c_out)
        gw = (flat_cols.T @ flat_g).reshape(k, c_in, c_out)
        gx = None
        if x.requires_grad:
            gcols = (flat_g @ weight.data.reshape(k * c_in, c_out).T).reshape(*lead, out_len, k, c_in)
            gx = np.zeros(xd.shape)
            for dt in range(k):
                gx[..., dt:dt + out_len, :] += gcols[..., dt, :]
            if padding:
                gx = gx[..., padding:length - padding, :]
        grads = (gx, gw)
        if bias is not None:
            grads += (flat_g.sum(axis=0),)
        return grads
    return _make(out, parents, backward, "conv1d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[..., Cin] @ weight[Cin, Cout] + bias``."""
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        c_in, c_out = weight.shape
        grads = (g @ weight.data.T, x.data.reshape(-1, c_in).T @ g.reshape(-1, c_out))
        if bias is not None:
            grads += (g.reshape(-1, c_out).sum(axis=0),)
        return grads
    return _make(out, parents, backward, "linear")


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """``-log p[label]`` with ``p`` floored at 1e-12; mean over leading batch axes."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = probs.shape[-1]
    if labels.shape != probs.shape[:-1]:
        raise InvalidArgument(f"labels shape {labels.shape} does not match probabilities {probs.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidArgument(f"label out of range [0, {n_classes})")
    picked = np.take_along_axis(probs.data, labels[..., None], axis=-1)[..., 0]
    floored = np.maximum(picked, PROB_FLOOR)
    count = max(labels.size, 1)
    loss = -np.log(floored).sum() / count

    def backward(g):
        gp = np.zeros_like(probs.data)
        live = picked > PROB_FLOOR
        vals = np.where(live, -1.0 / floored, 0.0) * g / count
        np.put_along_axis(gp, labels[..., None], vals[..., None], axis=-1)
        return (gp,)
    return _make(np.asarray(loss), (probs,), backward, "cross_entropy")


# optimisation --------------------------------------------------------------

class SGD:
    """``v <- v - lr * b`` with ``b <- momentum * b + (grad + wd * v)``."""

    def __init__(self, params: Iterable[Param], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {id(p): np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingDiverged(f"non-finite gradient for {p.name}")
        for p in self.params:
            d = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                buf = self.buffers[id(p)]
                buf *= self.momentum
                buf += d
                d = buf
            p.data = p.data - self.lr * d


def sgd_step(params: Iterable[Param], learning_rate: float, weight_decay: float = 0.0) -> None:
    """One plain SGD update in place."""
    SGD(params, learning_rate, weight_decay=weight_decay).step()


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values.  Up to
    ``samples`` coordinates per tensor are checked (all when ``None``).
    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    exactly-zero and roundoff-sized gradients from dividing by zero.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise InvalidArgument(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = np.zeros_like(p.data)
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if samples is not None and flat.size > samples:
            coords = rng.choice(flat.size, size=samples, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            plus = f().item()
            flat[i] = orig - epsilon
            minus = f().item()
            flat[i] = orig
            numeric = (plus - minus) / (2 * epsilon)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst


def fgsm_perturb(x, input_grad, epsilon: float) -> np.ndarray:
    """``x + epsilon * sign(grad)``; ``sign(0) = 0``."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    g = np.asarray(input_grad.data if isinstance(input_grad, Tensor) else input_grad, dtype=np.float64)
    if x.shape != g.shape:
        raise InvalidArgument(f"input shape {x.shape} != gradient shape {g.shape}")
    if epsilon < 0:
        raise InvalidArgument("epsilon must be non-negative")
    if epsilon == 0:
        return x.copy()
    return x + epsilon * np.sign(g)
