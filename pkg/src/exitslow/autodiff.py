"""Small define-by-run reverse-mode autodiff over numpy arrays.

Operations executed inside an active :class:`GradientTape` are recorded in
creation order; :func:`backward` replays them in reverse.  Outside a tape the
same functions are plain numpy computations, which is what inference uses.

    with GradientTape() as tape:
        y = matmul(x, w)
        loss = reduce_sum(y)
    backward(loss)
    w.grad
"""
from __future__ import annotations

import itertools
import math
import threading
from typing import Callable, Sequence

import numpy as np

_local = threading.local()
_tape_ids = itertools.count(1)


class DimensionError(ValueError):
    pass


class NumericError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class DiffTensor:
    """Dense array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __truediv__(self, other):
        if isinstance(other, DiffTensor):
            raise TypeError("division by a DiffTensor is not supported")
        return mul(self, 1.0 / other)


def _not_scalar(t: DiffTensor):
    raise ContractError(f"expected a scalar, got shape {t.shape}")


class GradientTape:
    """Ordered record of primitive operations.

    Each node is ``(output, inputs, backward_fn)`` where ``backward_fn`` maps
    the output gradient to a tuple of input gradients (``None`` entries are
    skipped).
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: list[tuple[DiffTensor, tuple[DiffTensor, ...], Callable]] = []
        self._prev: GradientTape | None = None

    def __enter__(self) -> "GradientTape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev

    def watch(self, t: DiffTensor) -> DiffTensor:
        t.requires_grad = True
        t.tape_id = self.id
        return t


def active_tape() -> GradientTape | None:
    return getattr(_local, "tape", None)


def as_tensor(x, dtype=None) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64 if dtype is None else dtype)
    return DiffTensor(arr)


def _pair(a, b) -> tuple[DiffTensor, DiffTensor]:
    # constants take the dtype of the tensor operand so float32 graphs stay float32
    if isinstance(a, DiffTensor) and not isinstance(b, DiffTensor):
        return a, DiffTensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, DiffTensor) and not isinstance(a, DiffTensor):
        return DiffTensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _record(out_data: np.ndarray, inputs: Sequence[DiffTensor], fn: Callable) -> DiffTensor:
    out = DiffTensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_id = tape.id
        tape.nodes.append((out, tuple(inputs), fn))
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


def backward(loss: DiffTensor, tape: GradientTape | None = None) -> None:
    """Populate ``grad`` on every recorded ancestor of ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = tape or active_tape()
    if tape is None or loss.tape_id != tape.id:
        raise ContractError("loss is not on the active gradient tape")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, fn in reversed(tape.nodes):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for t, g in zip(inputs, grads):
            if g is None or not t.requires_grad:
                continue
            g = np.asarray(g, dtype=t.data.dtype)
            t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> DiffTensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> DiffTensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> DiffTensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def tanh(x: DiffTensor) -> DiffTensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: DiffTensor) -> DiffTensor:
    """tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _record(y, (x,), fn)


# ---------------------------------------------------------------- shape ops


def reshape(x: DiffTensor, shape) -> DiffTensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: DiffTensor, axes=None) -> DiffTensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


# ---------------------------------------------------------------- reductions


def reduce_sum(x: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    y = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(np.asarray(y), (x,), fn)


def reduce_mean(x: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> DiffTensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad_, bd = a.data, b.data
    if bd.ndim == 2 and ad_.ndim > 2:
        # (..., m) @ (m, n): one flat BLAS call each way
        flat = ad_.reshape(-1, ad_.shape[-1])

        def fn2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad_.shape), flat.T @ g2

        return _record((flat @ bd).reshape(ad_.shape[:-1] + (bd.shape[1],)), (a, b), fn2)

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad_.shape)
        gb = _unbroadcast(np.swapaxes(ad_, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(ad_ @ bd, (a, b), fn)


def layer_norm(x: DiffTensor, gamma: DiffTensor, beta: DiffTensor, eps: float = 1e-5) -> DiffTensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float64).astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    y = xhat * gd + beta.data

    def fn(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record(y, (x, gamma, beta), fn)


def embedding_lookup(table: DiffTensor, ids) -> DiffTensor:
    """Gather rows of ``table``; the backward pass scatter-adds into a dense buffer."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]

    def fn(g):
        buf = np.zeros(table.shape, dtype=np.float64)
        np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (buf,)

    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise DomainError(f"embedding id out of range [0, {n})")
    return _record(table.data[ids], (table,), fn)


# ---------------------------------------------------------------- probabilistic


def _check_finite(x: np.ndarray) -> None:
    if np.isnan(x).any():
        raise NumericError("NaN in softmax input")


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits, axis: int = -1, bias: np.ndarray | None = None) -> DiffTensor:
    """Max-stabilised softmax.  ``bias`` is a constant additive mask."""
    logits = as_tensor(logits)
    _check_finite(logits.data)
    x = logits.data if bias is None else logits.data + bias
    y = _softmax_np(x, axis)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (logits,), fn)


def log_softmax(logits, axis: int = -1) -> DiffTensor:
    logits = as_tensor(logits)
    _check_finite(logits.data)
    y = _log_softmax_np(logits.data, axis)
    p = np.exp(y)

    def fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(y, (logits,), fn)


def cross_entropy(logits, target, reduction: str = "sum") -> DiffTensor:
    """-log softmax(logits)[target], over the last axis.

    ``target`` may be an int (single vector) or an int array matching the
    leading dimensions of ``logits``.
    """
    logits = as_tensor(logits)
    k = logits.shape[-1]
    tgt = np.asarray(target, dtype=np.int64)
    if tgt.shape != logits.shape[:-1]:
        raise DimensionError(f"target shape {tgt.shape} does not match logits {logits.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= k):
        raise DomainError(f"target class out of range [0, {k})")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
    return _weighted_nll(logits, onehot, reduction)


def soft_cross_entropy(logits, target_dist, reduction: str = "sum") -> DiffTensor:
    """-sum_k target_k * log softmax(logits)_k."""
    logits = as_tensor(logits)
    tgt = np.asarray(target_dist, dtype=logits.dtype)
    if np.any(np.abs(tgt.sum(axis=-1) - 1.0) > 1e-6) or np.any(tgt < 0):
        raise DomainError("soft target must be a probability vector")
    tgt = np.broadcast_to(tgt, logits.shape)
    return _weighted_nll(logits, tgt, reduction)


def _weighted_nll(logits: DiffTensor, tgt: np.ndarray, reduction: str) -> DiffTensor:
    ls = log_softmax(logits)
    per = mul(reduce_sum(mul(ls, tgt), axis=-1), -1.0)
    if reduction == "none":
        return per
    if reduction == "sum":
        return reduce_sum(per)
    if reduction == "mean":
        return reduce_mean(per)
    raise ValueError(f"unknown reduction {reduction!r}")


def entropy_np(probs: np.ndarray, axis: int = -1) -> np.ndarray:
    """Natural-log entropy with 0 ln 0 = 0 (plain numpy helper)."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


softmax_np = _softmax_np
log_softmax_np = _log_softmax_np
