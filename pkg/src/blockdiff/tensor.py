"""Dense tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active and an
input requires gradients, the op appends a node to the tape holding its inputs,
its output and a vector-Jacobian closure. :func:`backward` walks the tape in
reverse, which is a valid topological order because nodes are appended as they
are created.

Shapes must match exactly. The only broadcast is a bias row added along the
last axis (:func:`add_bias`, :func:`rms_norm` gains) and weight matrices applied
to the last axis of a batch (:func:`linear`).
"""

from __future__ import annotations

import math
import threading
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

RMS_EPS = 1e-6

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording on this thread, e.g. for inference inside a tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_recorded")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._recorded = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self, -1, -2)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest per thread and never share state.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def record(self, inputs, output: Tensor, vjp) -> None:
        output.requires_grad = True
        output._recorded = True
        self.nodes.append(Node(tuple(inputs), output, vjp))


def _result(data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, out, vjp)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(tape: Tape, loss: Tensor, wrt=None):
    """Reverse sweep from a scalar ``loss``.

    Sets ``.grad`` on every leaf that requires gradients. With ``wrt`` given as
    a mapping or sequence of tensors, returns gradients in the same structure
    (zeros for tensors the loss does not depend on).
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not inp._recorded:
                leaves[key] = inp
    for key, leaf in leaves.items():
        leaf.grad = grads[key]

    def lookup(t: Tensor) -> np.ndarray:
        g = grads.get(id(t)) if id(t) in leaves else None
        return np.zeros_like(t.data) if g is None else g

    if wrt is None:
        return None
    if isinstance(wrt, Mapping):
        return {k: lookup(v) for k, v in wrt.items()}
    return [lookup(t) for t in wrt]


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x + bias`` with ``bias`` of shape ``x.shape[-1:]`` added to every row."""
    if bias.shape != x.shape[-1:]:
        raise ValueError(f"add_bias: bias shape {bias.shape} does not match rows of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    x2 = xd * xd
    th = np.tanh(c * xd * (1.0 + xd.dtype.type(0.044715) * x2))
    out = 0.5 * xd * (1.0 + th)

    def vjp(g):
        dinner = c * (1.0 + xd.dtype.type(3 * 0.044715) * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _result(out.astype(xd.dtype, copy=False), (x,), vjp)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,))


# ------------------------------------------------------------------- shapes


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, ax1: int, ax2: int) -> Tensor:
    return _result(np.swapaxes(x.data, ax1, ax2), (x,), lambda g: (np.swapaxes(g, ax1, ax2),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    if isinstance(idx, Tensor):
        raise TypeError("index: indices must be integer arrays, not Tensors")

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, vjp)


# ------------------------------------------------------------------ products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(
        ad @ bd,
        (a, b),
        lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g),
    )


def linear(x: Tensor, w: Tensor) -> Tensor:
    """Apply a ``(k, n)`` weight matrix to the last axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    xd, wd = x.data, w.data

    def vjp(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return _result(xd @ wd, (x, w), vjp)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding: id out of range [0, {table.shape[0]})")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), vjp)


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def weighted_sum(x: Tensor, weights) -> Tensor:
    """``sum(x * weights)`` with constant weights of the same shape."""
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ValueError(f"weighted_sum: weights {w.shape} vs values {x.shape}")
    return _result(np.asarray((x.data * w).sum()), (x,), lambda g: (g * w,))


# ------------------------------------------------------------ normalization


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    if gain.shape != x.shape[-1:]:
        raise ValueError(f"rms_norm: gain shape {gain.shape} vs {x.shape}")
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + xd.dtype.type(eps))
    xhat = xd * inv
    lead = tuple(range(xd.ndim - 1))

    def vjp(g):
        gg = (g * xhat).sum(axis=lead)
        gh = g * gd
        gx = inv * (gh - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, gg

    return _result(xhat * gd, (x, gain), vjp)


def masked_softmax_rows(x: Tensor, allow) -> Tensor:
    """Softmax over the last axis restricted to ``allow``.

    ``allow`` is boolean and either matches ``x`` or broadcasts over its
    leading axes (a shared ``(n, n)`` visibility matrix for a batch of score
    matrices). Disallowed entries come out exactly zero.
    """
    allow = np.asarray(allow, dtype=bool)
    try:
        ok = np.broadcast_shapes(allow.shape, x.shape) == x.shape
    except ValueError:
        ok = False
    if not ok:
        raise ValueError(f"masked_softmax_rows: mask {allow.shape} vs scores {x.shape}")
    if not allow.any(axis=-1).all():
        raise ValueError("masked_softmax_rows: a row has no allowed positions")
    xd = x.data
    neg = np.where(allow, xd, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    e = np.exp(neg - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p.astype(xd.dtype, copy=False), (x,), vjp)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row ``-log softmax(logits)[target]``.

    ``logits`` of shape ``(V,)`` with an int target gives a scalar; ``(N, V)``
    with ``N`` targets gives a vector of ``N`` losses.
    """
    scalar = logits.ndim == 1
    z = logits.data[None] if scalar else logits.data
    t = np.atleast_1d(np.asarray(targets))
    if z.ndim != 2 or t.shape != (z.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    if t.dtype.kind not in "iu":
        raise TypeError("cross_entropy: targets must be integers")
    V = z.shape[1]
    if t.size and (t.min() < 0 or t.max() >= V):
        raise ValueError(f"cross_entropy: target out of range [0, {V})")
    rows = np.arange(z.shape[0])
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[rows, t]

    def vjp(g):
        gz = np.exp(logp)
        gz[rows, t] -= 1.0
        gz *= np.reshape(g, (-1, 1))
        return (gz[0] if scalar else gz,)

    out = loss[0] if scalar else loss
    return _result(np.asarray(out), (logits,), vjp)


def softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain numpy softmax, for inference paths that need no tape."""
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)
