"""Dense tensors with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active and at
least one input requires a gradient, so inference code pays no bookkeeping
cost::

    with Tape() as tape:
        loss = cross_entropy(model(x), y)
    tape.backward(loss)

Gradients of leaf tensors accumulate into ``tensor.grad``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np

_default_dtype = np.float32
_tapes: list = []


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new float tensors."""
    global _default_dtype
    old, _default_dtype = _default_dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                arr = data
            else:
                arr = np.asarray(data, dtype=_default_dtype)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self):
        return mean(self)


class _Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of executed ops; replayed in reverse by :meth:`backward`.

    A tape is single-use: ``backward`` consumes its records.
    """

    def __init__(self):
        self.records: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.pop()

    def backward(self, loss: Tensor, grad=None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ValueError("backward without grad requires a scalar output")
            grad = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        leaves = {id(loss): loss}
        for node in reversed(self.records):
            g = grads.pop(id(node.out), None)
            leaves.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g if t.grad is None else t.grad + g
        self.records.clear()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on any active tape."""
    _tapes.append(None)
    try:
        yield
    finally:
        _tapes.pop()


def is_recording() -> bool:
    return bool(_tapes) and _tapes[-1] is not None


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=_default_dtype))
    return Tensor(np.asarray(x))


def _emit(op: str, data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    tape = _tapes[-1] if _tapes else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.records.append(_Node(op, inputs, out, backward))
    return out


def _check_trailing(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(op, sa, sb)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 0 and b.dtype != a.dtype:
        b = Tensor(b.data.astype(a.dtype))
    elif a.ndim == 0 and a.dtype != b.dtype:
        a = Tensor(a.data.astype(b.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_trailing("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_trailing("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_trailing("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", ad * bd, (a, b), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    th = x2 * (0.044715 * xd)
    th += xd
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= xd
    out *= 0.5

    def backward(g):
        a = x2 * (3 * 0.044715)
        a += 1.0
        a *= _GELU_C
        b = th * th
        np.subtract(1.0, b, out=b)
        b *= xd
        b *= a
        b += 1.0
        b += th
        b *= 0.5
        b *= g
        return (b,)

    return _emit("gelu", out, (x,), backward)


# ------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, tuple(axes))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,),
                 lambda g: (g.transpose(inv),))


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _emit("mean", np.asarray(x.data.mean()), (x,),
                 lambda g: (np.full(shape, g / n, dtype=x.dtype),))


# -------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must match exactly, or one operand must be 2-d.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if bd.ndim > 2 and ad.ndim == 2:
                ga = (g @ np.swapaxes(bd, -1, -2)).reshape(-1, *ad.shape).sum(0)
            else:
                ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                k, n = ad.shape[-1], g.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), backward)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise TypeError("embedding_lookup: indices must be integers")
    if table.ndim != 2:
        raise ShapeError("embedding_lookup", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: index out of range for table {table.shape}")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _emit("embedding_lookup", table.data[idx], (table,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _emit("layer_norm", out, (x, gamma, beta), backward)


# ------------------------------------------------------- softmax & selection


def _softmax_np(s: np.ndarray, mask=None) -> np.ndarray:
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(s: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis, max-shifted for stability.

    ``mask`` is an optional boolean array broadcastable to ``s``; masked-out
    entries get probability exactly zero.
    """
    p = _softmax_np(s.data, mask)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", p, (s,), backward)


def _onehot_argmax(s: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index: ties go to the lowest index
    idx = np.argmax(s, axis=-1)
    out = np.zeros_like(s)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def hard_select(s: Tensor) -> Tensor:
    """One-hot of the argmax over the last axis. Not differentiable."""
    return Tensor(_onehot_argmax(s.data))


def straight_through(s: Tensor) -> Tensor:
    """Hard one-hot forward; softmax Jacobian backward."""
    p = _softmax_np(s.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("straight_through", _onehot_argmax(s.data), (s,), backward)


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention with a causal mask over the last two axes.

    Fused into one node: (..., T, dh) inputs, (..., T, dh) output.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim < 2:
        raise ShapeError("causal_attention", q.shape, k.shape, v.shape)
    t, dh = q.shape[-2:]
    scale = np.asarray(1.0 / math.sqrt(dh), dtype=q.dtype)
    qd, kd, vd = q.data, k.data, v.data
    s = qd @ np.swapaxes(kd, -1, -2)
    s *= scale
    s += _additive_causal_mask(t, q.dtype)
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s, out=s)
    p /= p.sum(axis=-1, keepdims=True)

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g
        dp = g @ np.swapaxes(vd, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        ds *= scale
        return ds @ kd, np.swapaxes(ds, -1, -2) @ qd, gv

    return _emit("causal_attention", p @ vd, (q, k, v), backward)


_mask_cache: dict = {}


def _additive_causal_mask(t: int, dtype) -> np.ndarray:
    key = (t, np.dtype(dtype).str)
    if key not in _mask_cache:
        m = np.zeros((t, t), dtype=dtype)
        m[np.triu_indices(t, 1)] = -np.inf
        _mask_cache[key] = m
    return _mask_cache[key]


def cross_entropy(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    Positions whose target equals ``ignore_index`` are excluded from the mean.
    """
    t = np.asarray(targets)
    if logits.shape[:-1] != t.shape:
        raise ShapeError("cross_entropy", logits.shape, t.shape)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tf = t.reshape(-1)
    valid = tf != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise ValueError("cross_entropy: no valid targets")
    if tf[valid].min() < 0 or tf[valid].max() >= v:
        raise IndexError(f"cross_entropy: target out of range for {v} classes")
    safe = np.where(valid, tf, 0)
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(len(tf)), safe]
    loss = np.asarray((nll * valid).sum() / n, dtype=logits.dtype)
    shape = logits.shape

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(tf)), safe] -= 1.0
        p *= (valid / n)[:, None] * g
        return (p.reshape(shape),)

    return _emit("cross_entropy", loss, (logits,), backward)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ------------------------------------------------------------- verification


def finite_difference(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5,
                      index: Sequence[tuple] | None = None) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``x``.

    ``x.data`` is perturbed in place and restored. With ``index`` given, only
    those coordinates are evaluated (others are left as NaN).
    """
    grad = np.full(x.shape, np.nan)
    coords = list(np.ndindex(*x.shape)) if index is None else [tuple(i) for i in index]
    with no_grad():
        for c in coords:
            orig = x.data[c]
            x.data[c] = orig + eps
            up = float(fn().data)
            x.data[c] = orig - eps
            down = float(fn().data)
            x.data[c] = orig
            grad[c] = (up - down) / (2 * eps)
    return grad
