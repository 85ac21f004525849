"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Ops executed inside an active :class:`Tape` are recorded when any input
requires a gradient; outside a tape they only compute values, which is the
inference path. Elementwise broadcasting is limited to leading dimensions:
the shorter operand's shape must be a suffix of the longer one's.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "Module",
    "NonFiniteError",
    "ShapeError",
    "TapeError",
    "parameter",
    "backward",
    "no_tape",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "silu",
    "sum",
    "mean",
    "slice_",
    "gather",
    "concat",
    "softmax",
    "transpose",
    "swap_last",
    "reshape",
    "layer_norm",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_active: list["Tape"] = []


class Tape:
    """Append-only record of differentiable ops.

    Use as a context manager; ops run inside the block are recorded.
    ``backward`` may be called once per recording; ``reset`` clears it.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        if self._consumed:
            raise TapeError("backward already ran on this tape; reset it first")
        self._consumed = True
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.data)
        for out, inputs, rule in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            grads = rule(g)
            for inp, gi in zip(inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi


class Tensor:
    """Dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf the loss depends on."""
    if loss._tape is None:
        raise TapeError("loss is detached: it was not computed inside a Tape")
    loss._tape.backward(loss)


@contextmanager
def no_tape():
    """Suspend recording; ops inside only compute values."""
    saved = list(_active)
    _active.clear()
    try:
        yield
    finally:
        _active.extend(saved)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{kind} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tape = _active[-1] if _active else None
    out._tape = tape
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.nodes.append((out, tuple(inputs), rule))
    return out


def _check_suffix(kind: str, a: tuple, b: tuple) -> None:
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{kind}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b):
        b = Tensor(b)
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return _emit("add", a.data + c, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_suffix("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b):
        b = Tensor(b)
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if not isinstance(a, Tensor):
        return add(neg(b), float(a))
    _check_suffix("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b):
        b = Tensor(b)
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return _emit("mul", a.data * c, (a,), lambda g: (g * c,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_suffix("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit("mul", ad * bd, (a, b), rule)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _emit("log", out, (a,), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = expit(x)
    return _emit("silu", x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))


# ------------------------------------------------------------------ reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", np.asarray(out), (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / count)


# -------------------------------------------------------------------- algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} and {b.shape}")
    _check_suffix("matmul", a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    flat = bd.ndim == 2 and ad.ndim > 2
    # a stack times a matrix runs as one 2-d product; numpy's stacked path is slower

    def rule(g):
        ga = gb = None
        if need_a and flat:
            ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
        elif need_a:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if need_b and bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        elif need_b:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    if flat:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])
    else:
        out = ad @ bd
    return _emit("matmul", out, (a, b), rule)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


# ------------------------------------------------------------------- indexing


def slice_(a: Tensor, key) -> Tensor:
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _emit("slice", np.array(a.data[key]), (a,), rule)


def gather(a: Tensor, index, axis: int) -> Tensor:
    """Select entries ``index`` along ``axis`` (numpy ``take``)."""
    idx = np.asarray(index, dtype=np.intp)
    axis = axis % a.ndim
    if idx.ndim != 1 or (idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis])):
        raise ShapeError(f"gather: index out of range for shape {a.shape} on axis {axis}")
    shape = a.shape
    unique = np.unique(idx).size == idx.size
    lead = (slice(None),) * axis

    def rule(g):
        full = np.zeros(shape)
        if unique:
            full[lead + (idx,)] = g
        else:
            np.add.at(full, lead + (idx,), g)
        return (full,)

    return _emit("gather", np.take(a.data, idx, axis=axis), (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        other = t.shape[:axis] + t.shape[axis + 1:]
        ref = tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]
        if t.ndim != ndim or other != ref:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit("concat", data, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


# ---------------------------------------------------------------- composites


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), rule)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}, {bias.shape} vs input {a.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", xhat * gd + bias.data, (a, gain, bias), rule)


# --------------------------------------------------------------------- modules


class Module:
    """Container that discovers parameters and submodules by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{prefix}{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()
