"""Float64 tensors with a reverse-mode differentiation tape.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active
(``with Tape() as tape:``) every operation is appended to it together with
its backward rule; :meth:`Tape.backward` then walks the record in reverse
and accumulates gradients into every leaf tensor created with
``requires_grad=True``.

Gradients accumulate (``+=``) across backward calls until
:meth:`Tensor.zero_grad` is called.
"""

from __future__ import annotations

import itertools
import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NonFiniteError

__all__ = [
    "Tensor",
    "Tape",
    "active_tape",
    "no_tape",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "gelu",
    "concat_rows",
    "concat",
    "broadcast_to",
    "reshape",
    "swapaxes",
    "take",
    "index",
    "tsum",
    "mean",
    "square",
    "l2_normalize",
    "cross_entropy",
    "finite_diff_check",
]

_local = threading.local()
_tokens = itertools.count(1)


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


class no_tape:
    """Suspend recording: operations inside the block never reach a tape."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_needs", "_token", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._needs = self.requires_grad
        self._token = 0
        self.name = name

    @classmethod
    def _result(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._needs = False
        t._token = 0
        t.name = None
        return t

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
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor._result(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._result(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("out", "inputs", "rule")

    def __init__(self, out, inputs, rule):
        self.out = out
        self.inputs = inputs
        self.rule = rule


class Tape:
    """Ordered record of operations executed while the tape is active."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaf_ids: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self._token = next(_tokens)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        st = _stack()
        if st and st[-1] is self:
            st.pop()
        return False

    def reset(self) -> None:
        self.nodes.clear()
        self.leaf_ids.clear()
        self._leaves.clear()

    def record(self, out: Tensor, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
        for inp in inputs:
            if inp.requires_grad and id(inp) not in self.leaf_ids:
                self.leaf_ids.add(id(inp))
                self._leaves[id(inp)] = inp
        out._needs = any(inp._needs for inp in inputs)
        out._token = self._token
        self.nodes.append(_Node(out, tuple(inputs), rule))
        return out

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf's ``grad``."""
        if loss.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._token != self._token:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None or not node.out._needs:
                continue
            needs = tuple(inp._needs for inp in node.inputs)
            in_grads = node.rule(g, needs)
            for inp, need, gi in zip(node.inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                if inp.requires_grad:
                    inp.grad += gi
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _emit(arr: np.ndarray, inputs: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor._result(arr)
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g, n: (_unbroadcast(g, sa) if n[0] else None,
                               _unbroadcast(g, sb) if n[1] else None), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g, n: (_unbroadcast(g, sa) if n[0] else None,
                               _unbroadcast(-g, sb) if n[1] else None), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def rule(g, n):
        return (_unbroadcast(g * bd, ad.shape) if n[0] else None,
                _unbroadcast(g * ad, bd.shape) if n[1] else None)

    return _emit(ad * bd, (a, b), rule, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g, n: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad * ad, (a,), lambda g, n: (2.0 * ad * g,), "square")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    return _emit(xd * cdf, (x,), lambda g, n: (g * (cdf + xd * pdf),), "gelu")


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 2-D right operand shared across a batch of left operands is the
    common case (token rows times a weight matrix).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def rule(g, n):
        ga = gb = None
        if n[0]:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if n[1]:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(np.matmul(ad, bd), (a, b), rule, "matmul")


# -- row-wise reductions ---------------------------------------------------


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    xd = x.data
    z = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def rule(g, n):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), rule, "softmax_rows")


def log_softmax_rows(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def rule(g, n):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (x,), rule, "log_softmax_rows")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis (population variance) then apply ``gamma, beta``."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs a feature dimension of at least 2")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine parameters must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        inv = 1.0 / np.sqrt(var + eps)
    # eps == 0 on a constant vector: the centred values are exactly zero anyway
    inv = np.where(np.isfinite(inv), inv, 0.0)
    xhat = xc * inv
    gd, bd = gamma.data, beta.data

    def rule(g, n):
        gx = gg = gbeta = None
        if n[0]:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if n[1]:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if n[2]:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gbeta

    return _emit(xhat * gd + bd, (x, gamma, beta), rule, "layer_norm")


def l2_normalize(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, floor)
    y = xd / norm

    def rule(g, n):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _emit(y, (x,), rule, "l2_normalize")


def tsum(x: Tensor, axis=None) -> Tensor:
    xd = x.data
    shape = xd.shape

    def rule(g, n):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(np.asarray(xd.sum(axis=axis)), (x,), rule, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / count)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits[B, C]`` against integer labels."""
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects logits of shape (B, C)")
    labels = np.asarray(labels, dtype=np.int64)
    ld = logits.data
    b = ld.shape[0]
    shifted = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    loss = float((lse - shifted[rows, labels]).sum() / b)

    def rule(g, n):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / b),)

    return _emit(np.asarray(loss), (logits,), rule, "cross_entropy")


# -- structural ------------------------------------------------------------


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    nd = parts[0].ndim
    ax = axis % nd
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[i] != parts[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[q.shape for q in parts]}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def rule(g, n):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if n[i] else None
            for i in range(len(parts))
        )

    return _emit(np.concatenate([p.data for p in parts], axis=ax), parts, rule, "concat")


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Rows of ``a`` followed by rows of ``b`` (second-to-last axis)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"concat_rows: feature widths differ, {a.shape} vs {b.shape}")
    return concat([a, b], axis=-2)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    xs = x.shape
    try:
        arr = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {xs} to {shape}") from None
    return _emit(arr, (x,), lambda g, n: (_unbroadcast(g, xs),), "broadcast_to")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    xs = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g, n: (g.reshape(xs),), "reshape")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _emit(np.swapaxes(x.data, a1, a2), (x,),
                 lambda g, n: (np.swapaxes(g, a1, a2),), "swapaxes")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(indices, dtype=np.int64)
    xs = x.shape
    ax = axis % x.ndim

    def rule(g, n):
        gx = np.zeros(xs)
        moved = np.moveaxis(gx, ax, 0)
        np.add.at(moved, idx.reshape(-1), np.moveaxis(g, ax, 0).reshape((-1,) + moved.shape[1:]))
        return (gx,)

    return _emit(np.take(x.data, idx, axis=ax), (x,), rule, "take")


def index(x: Tensor, key) -> Tensor:
    xs = x.shape
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, slice, type(Ellipsis))) for k in parts)

    def rule(g, n):
        gx = np.zeros(xs)
        if basic:
            gx[key] += g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _emit(np.array(x.data[key]), (x,), rule, "index")


# -- verification ----------------------------------------------------------


def finite_diff_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` takes no arguments and rebuilds its graph from the current leaf
    values on every call. Returns the largest
    ``|analytic - numeric| / max(1, |numeric|)`` over all leaf coordinates.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-7, 1e-3]")
    for leaf in leaves:
        if not leaf.requires_grad:
            raise ValueError("finite_diff_check leaves must have requires_grad=True")
    base1 = f().item()
    base2 = f().item()
    if base1 != base2:
        raise RuntimeError("function is not deterministic: two baseline evaluations differ")
    saved = [leaf.grad.copy() for leaf in leaves]
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [leaf.grad.copy() for leaf in leaves]
    for leaf, s in zip(leaves, saved):
        leaf.grad[...] = s
    worst = 0.0
    for leaf, ga in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            err = abs(gflat[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst
