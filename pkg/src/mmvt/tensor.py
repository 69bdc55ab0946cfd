"""Dense numpy-backed tensors with a reverse-mode gradient tape.

Every differentiable op records a :class:`Node` on its output. Calling
:func:`backward` on a scalar result orders the reachable nodes into a
:class:`Tape` (parents before children) and replays it in reverse.

Shapes must agree exactly except for the bias-add case, where the right
operand matches the last axis of the left one. Use :func:`broadcast_to`
for anything else.
"""

from __future__ import annotations

import contextlib
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_SQRT2PI = np.sqrt(2.0 * np.pi)

_state = threading.local()
_DEBUG = os.environ.get("MMVT_DEBUG", "") not in ("", "0")


def set_debug(enabled: bool) -> None:
    """Toggle non-finite checks on every op output."""
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_enabled() -> bool:
    return _DEBUG


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class ShapeError(ValueError):
    pass


class DTypeError(TypeError):
    pass


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def _check(arr: np.ndarray, op: str) -> None:
    if _DEBUG and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite value produced by {op}")


def _make(data: np.ndarray, op: str, parents: tuple, backward) -> Tensor:
    _check(data, op)
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward)
    return out


def _same_dtype(op: str, *ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise DTypeError(f"{op}: dtype mismatch {dt} vs {t.dtype}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("add", a, b)
    if a.shape == b.shape:
        return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.shape[-1:] == b.shape:
        lead = tuple(range(a.ndim - 1))
        return _make(a.data + b.data, "add_bias", (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add: dims {a.dims} and {b.dims} do not agree")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("sub", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: dims {a.dims} and {b.dims} do not agree")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: dims {a.dims} and {b.dims} do not agree")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact erf form."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def back(g):
        pdf = np.exp(-0.5 * xd * xd) / _SQRT2PI
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return _make((xd * cdf).astype(xd.dtype, copy=False), "gelu", (x,), back)


# ------------------------------------------------------------------ structure


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(tuple(shape))
    return _make(out, "reshape", (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, "transpose", (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    _same_dtype("concat", *xs)
    axis = axis % xs[0].ndim
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _make(np.concatenate([t.data for t in xs], axis=axis), "concat", tuple(xs), back)


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing only; advanced indexing is rejected."""
    idx = index if isinstance(index, tuple) else (index,)
    for i in idx:
        if not (isinstance(i, (int, slice)) or i is Ellipsis):
            raise TypeError("only int/slice/Ellipsis indexing is supported")
    out = x.data[index]
    if out.ndim == 0:
        out = out.reshape(1)
    src_shape = x.shape
    dtype = x.dtype

    def back(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] += g.reshape(full[index].shape)
        return (full,)

    return _make(np.array(out), "getitem", (x,), back)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit expansion of size-1 axes (same rank required)."""
    shape = tuple(shape)
    if len(shape) != x.ndim or any(s != d and s != 1 for s, d in zip(x.shape, shape)):
        raise ShapeError(f"broadcast_to: cannot expand {x.dims} to {list(shape)}")
    axes = tuple(i for i, (s, d) in enumerate(zip(x.shape, shape)) if s != d)
    return _make(
        np.ascontiguousarray(np.broadcast_to(x.data, shape)),
        "broadcast_to",
        (x,),
        lambda g: (g.sum(axis=axes, keepdims=True),),
    )


# ------------------------------------------------------------------ reductions


def tsum(x: Tensor, axis=None) -> Tensor:
    src = x.shape
    if axis is None:
        out = np.asarray(x.data.sum()).reshape(1)
        return _make(out, "sum", (x,), lambda g: (np.full(src, g.reshape(-1)[0], dtype=x.dtype),))
    out = x.data.sum(axis=axis)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(out, "sum", (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


# --------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[..., m, k] @ [..., k, n]; leading dims must be identical."""
    _same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: dims {a.dims} and {b.dims} do not agree")
    ad, bd = a.data, b.data

    def back(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _make(ad @ bd, "matmul", (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., in] times w[out, in] transposed, plus optional bias[out]."""
    _same_dtype("linear", x, w)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input dims {x.dims} vs weight {w.dims}")
    xd, wd = x.data, w.data
    lead = x.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ wd.T).reshape(lead + (wd.shape[0],))
    parents: tuple = (x, w)
    if b is not None:
        _same_dtype("linear", x, b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias dims {b.dims} vs weight {w.dims}")
        out = out + b.data
        parents = (x, w, b)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        if b is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0))

    return _make(out, "linear", parents, back)


# --------------------------------------------------------------- nonlinearity


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, "softmax", (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, "log_softmax", (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.dims} / beta {beta.dims} vs width {d}")
    _same_dtype("layer_norm", x, gamma, beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def back(g):
        gh = g * gd
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _make(xhat * gd + beta.data, "layer_norm", (x, gamma, beta), back)


# ----------------------------------------------------------------------- loss


def cross_entropy_smoothed(
    logits: Tensor, targets: Iterable[int], smoothing: float = 0.0, reduction: str = "mean"
) -> Tensor:
    """Cross-entropy against 1-s on the true class and s/(C-1) elsewhere."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_smoothed: logits must be [B, C], got {logits.dims}")
    n, c = logits.shape
    t = np.asarray(list(targets), dtype=np.int64)
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy_smoothed: {t.size} targets for batch {n}")
    if np.any(t < 0) or np.any(t >= c):
        raise IndexError(f"class index out of range [0, {c})")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must be in [0, 1)")
    q = np.full((n, c), smoothing / (c - 1) if c > 1 else 0.0, dtype=logits.dtype)
    q[np.arange(n), t] = 1.0 - smoothing
    logp = log_softmax(logits, axis=-1)
    per = scale(tsum(mul(logp, Tensor(q)), axis=1), -1.0)
    if reduction == "none":
        return per
    if reduction == "mean":
        return mean(per)
    raise ValueError(f"unknown reduction {reduction!r}")


# ------------------------------------------------------------------- backward


@dataclass
class Tape:
    """Nodes in topological order: every parent precedes its child."""

    nodes: list[Tensor] = field(default_factory=list)
    outputs: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in reversed(t.node.parents):
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(nodes=order, outputs=[out])

    def backward(self, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        out = self.outputs[0]
        grads: dict[int, np.ndarray] = {
            id(out): np.ones_like(out.data) if seed is None else seed.astype(out.dtype)
        }
        for t in reversed(self.nodes):
            g = grads.get(id(t))
            if g is None or t.node is None:
                continue
            for p, gp in zip(t.node.parents, t.node.backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                gp = np.asarray(gp, dtype=p.dtype).reshape(p.shape)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + gp
                else:
                    grads[id(p)] = gp
        return grads


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")
    tape = Tape.from_output(loss)
    grads = tape.backward()
    for t in tape.nodes:
        if t.node is None and t.requires_grad:
            g = grads.get(id(t))
            if g is not None:
                t.grad = g if t.grad is None else t.grad + g
    return tape


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. ``params`` without touching ``.grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"grad needs a scalar loss, got dims {loss.dims}")
    grads = Tape.from_output(loss).backward()
    return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central differences (f(x+h) - f(x-h)) / 2h, one coordinate at a time."""
    base = x.data.copy()
    flat = base.reshape(-1)
    out = np.empty(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(base)).item()
            flat[i] = orig - h
            fm = f(Tensor(base)).item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out.reshape(x.shape).astype(x.dtype))


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all coordinates."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
