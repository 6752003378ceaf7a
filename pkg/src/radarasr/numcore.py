"""Dense numpy tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape (or inside ``no_grad``)
they are plain numpy computations, which is what inference uses.

>>> with Tape() as tape:
...     x = Tensor([3.0], requires_grad=True)
...     y = Tensor([5.0], requires_grad=True)
...     loss = (x * y).sum()
>>> grads = backward(loss, tape)
>>> float(grads[x.id].data[0]), float(grads[y.id].data[0])
(5.0, 3.0)
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyRow, NonFiniteError, NonFiniteProbe, NotScalar, ShapeMismatch

_ids = itertools.count(1)
_local = threading.local()
_dtype = np.float32

PRECISIONS = {"float64": np.float64, "float32": np.float32}


def set_precision(name: str) -> None:
    """Select the floating type new tensors are created with."""
    global _dtype
    _dtype = PRECISIONS[name]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    previous = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable
    parents: tuple[Tensor, ...] = field(repr=False)


class Tape:
    """Ordered record of primitive applications, confined to one thread."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.produced: set[int] = set()
        self.leaves: dict[int, Tensor] = {}

    def record(self, op, parents, out, vjp):
        for p in parents:
            if p.requires_grad and p.id not in self.produced:
                self.leaves.setdefault(p.id, p)
        self.nodes.append(Node(op, tuple(p.id for p in parents), out.id, vjp, tuple(parents)))
        self.produced.add(out.id)

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def primitive(op: str, parents: Sequence[Tensor], out: np.ndarray, vjp: Callable,
              finite: bool = True) -> Tensor:
    """Wrap a forward result and register its vector-Jacobian product.

    ``vjp(g)`` returns one gradient (or None) per parent, already reduced to
    the parent's shape.
    """
    if finite:
        _check_finite(op, out)
    result = Tensor(out, dtype=out.dtype if out.dtype.kind == "f" else None)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        result.requires_grad = True
        tape.record(op, parents, result, vjp)
    return result


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
    return primitive("add", (a, b), a.data + b.data,
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return primitive("sub", (a, b), a.data - b.data,
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return primitive("mul", (a, b), a.data * b.data,
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data
    return primitive("div", (a, b), out,
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * out / b.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return primitive("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return primitive("log", (x,), out, lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return primitive("relu", (x,), np.where(keep, x.data, 0).astype(x.data.dtype),
                     lambda g: (g * keep,))


def square(x: Tensor) -> Tensor:
    return primitive("square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data,))


# linear algebra and shape --------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} x {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return primitive("matmul", (a, b), a.data @ b.data, vjp)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is not None and len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return primitive("transpose", (x,), out, lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape) -> Tensor:
    return primitive("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return primitive("getitem", (x,), np.array(x.data[index]), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return primitive("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), vjp)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return primitive("sum", (x,), np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / count)


# normalisation and attention ----------------------------------------------

def masked_softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (True = visible).

    Masked entries come out exactly zero; a row with nothing visible is an
    error.
    """
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise EmptyRow("masked_softmax row has no unmasked entry")
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return primitive("masked_softmax", (x,), out, vjp)


def softmax(x: Tensor) -> Tensor:
    return masked_softmax(x, None)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return primitive("log_softmax", (x,), out, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = x.shape[-1]

    def vjp(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain.reshape(gain.shape), gbias.reshape(bias.shape)

    return primitive("layer_norm", (x, gain, bias), out, vjp)


# convolution front end -----------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 'same' convolution, channels-last: (T, F, Cin) -> (T, F, Cout)."""
    kt, kf, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeMismatch(f"conv2d input channels {x.shape[-1]} != {cin}")
    T, F = x.shape[0], x.shape[1]
    pt, pf = kt // 2, kf // 2
    padded = np.pad(x.data, ((pt, pt), (pf, pf), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(padded, (kt, kf), axis=(0, 1))
    # (T, F, Cin, kt, kf) -> (T*F, kt*kf*Cin) ordered like w
    cols = np.ascontiguousarray(cols.transpose(0, 1, 3, 4, 2)).reshape(T * F, kt * kf * cin)
    wmat = w.data.reshape(kt * kf * cin, cout)
    out = (cols @ wmat + b.data).reshape(T, F, cout)

    def vjp(g):
        g2 = g.reshape(T * F, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat.T).reshape(T, F, kt, kf, cin)
        gpad = np.zeros_like(padded)
        for i in range(kt):
            for j in range(kf):
                gpad[i:i + T, j:j + F] += gcols[:, :, i, j]
        return gpad[pt:pt + T, pf:pf + F], gw, gb

    return primitive("conv2d", (x, w, b), out, vjp)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pool with stride 2 on (T, F, C); odd sizes round up."""
    T, F, C = x.shape
    To, Fo = -(-T // 2), -(-F // 2)
    padded = np.full((2 * To, 2 * Fo, C), -np.inf, dtype=x.data.dtype)
    padded[:T, :F] = x.data
    blocks = padded.reshape(To, 2, Fo, 2, C).transpose(0, 2, 4, 1, 3).reshape(To, Fo, C, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gpad = gb.reshape(To, Fo, C, 2, 2).transpose(0, 3, 1, 4, 2).reshape(2 * To, 2 * Fo, C)
        return (gpad[:T, :F],)

    return primitive("max_pool2x2", (x,), out, vjp)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return primitive("embedding", (table,), table.data[ids], vjp)


# reverse pass --------------------------------------------------------------

def backward(loss: Tensor, tape: Tape, wrt: Sequence[Tensor] = ()) -> dict[int, Tensor]:
    """Gradients of a scalar ``loss`` for every leaf recorded on ``tape``.

    Tensors listed in ``wrt`` that the loss does not depend on get zeros.
    Fan-out contributions are summed in reverse tape order, so the result is
    deterministic for a given tape.
    """
    if loss.data.size != 1:
        raise NotScalar(f"loss has shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.asarray(pg, dtype=parent.data.dtype)
    result = {}
    for tid, leaf in itertools.chain(tape.leaves.items(), ((t.id, t) for t in wrt)):
        g = grads.get(tid)
        result[tid] = Tensor(np.zeros_like(leaf.data) if g is None else g, dtype=leaf.data.dtype)
    return result


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Largest relative disagreement between tape and central differences."""
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(probe)
    analytic = backward(loss, tape, wrt=[probe])[probe.id].data.reshape(-1)

    base = x.data.astype(np.float64)
    numeric = np.empty(base.size)
    flat = base.reshape(-1)
    for i in range(flat.size):
        vals = []
        for sign in (1.0, -1.0):
            shifted = flat.copy()
            shifted[i] += sign * step
            try:
                with no_grad():
                    v = f(Tensor(shifted.reshape(base.shape))).item()
            except NonFiniteError as exc:
                raise NonFiniteProbe(str(exc)) from exc
            if not np.isfinite(v):
                raise NonFiniteProbe(f"probe {i} evaluated to {v}")
            vals.append(v)
        numeric[i] = (vals[0] - vals[1]) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
