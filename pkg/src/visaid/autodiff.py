"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward() walks
the tape in reverse topological order. Only what the models here need is
implemented: broadcasting add/mul, matmul, a few elementwise functions, fused
attention / layer norm (delegated to :mod:`visaid.backend`), embedding gather,
row concatenation, dropout, and a fused label-smoothed cross entropy.

Gradient recording can be suspended with :func:`no_grad`, which makes repeated
forward evaluations (finite differences, greedy decoding) cheap.
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np

from . import backend

# per-thread so concurrent no-grad inference never disables recording elsewhere
_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


class Tensor:
    """An ndarray plus the tape node that produced it."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, value, requires_grad=False, parents=(), bwd=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def item(self) -> float:
        return float(self.value)

    def backward(self):
        if self.value.ndim != 0:
            raise ValueError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(value, parents, bwd) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, parents=tuple(parents), bwd=bwd)
    return Tensor(value)


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_value = a.value + b.value

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.value.shape))

    return _make(out_value, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_value = a.value * b.value

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.value.shape))

    return _make(out_value, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_value = a.value / b.value

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return _make(out_value, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_value = a.value @ b.value

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.value, -1, -2)
            a._accumulate(_unbroadcast(ga, a.value.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.value, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.value.shape))

    return _make(out_value, (a, b), bwd)


def tanh(a) -> Tensor:
    a = _coerce(a)
    out_value = np.tanh(a.value)

    def bwd(g):
        a._accumulate(g * (1.0 - out_value * out_value))

    return _make(out_value, (a,), bwd)


def relu(a) -> Tensor:
    a = _coerce(a)
    out_value = np.maximum(a.value, 0.0)

    def bwd(g):
        a._accumulate(g * (a.value > 0.0))

    return _make(out_value, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out_value = np.sqrt(a.value)

    def bwd(g):
        a._accumulate(g * 0.5 / out_value)

    return _make(out_value, (a,), bwd)


def tsum(a, axis=None) -> Tensor:
    a = _coerce(a)
    out_value = a.value.sum(axis=axis)

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.value.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy())

    return _make(out_value, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out_value = a.value.reshape(shape)

    def bwd(g):
        a._accumulate(g.reshape(a.value.shape))

    return _make(out_value, (a,), bwd)


def concat_rows(parts) -> Tensor:
    parts = [_coerce(p) for p in parts]
    out_value = np.concatenate([p.value for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.value.shape[0] for p in parts])

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi])

    return _make(out_value, tuple(parts), bwd)


def gather_rows(table, ids) -> Tensor:
    """Embedding lookup: rows of table (V, d) at integer ids (n,)."""
    table = _coerce(table)
    ids = np.asarray(ids, dtype=np.int64)
    out_value = table.value[ids]

    def bwd(g):
        acc = np.zeros_like(table.value)
        np.add.at(acc, ids, g)
        table._accumulate(acc)

    return _make(out_value, (table,), bwd)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    a = _coerce(a)
    if rate <= 0.0:
        return a
    keep = (rng.random(a.value.shape) >= rate).astype(a.value.dtype)
    scale = 1.0 / (1.0 - rate)
    out_value = a.value * keep * scale

    def bwd(g):
        a._accumulate(g * keep * scale)

    return _make(out_value, (a,), bwd)


# ---------------------------------------------------------------------------
# fused ops backed by the kernel lanes
# ---------------------------------------------------------------------------

def split_heads(a, head_count: int) -> Tensor:
    """(n, d) -> (H, n, d/H)."""
    a = _coerce(a)
    n, d = a.value.shape
    dh = d // head_count
    out_value = np.ascontiguousarray(a.value.reshape(n, head_count, dh).transpose(1, 0, 2))

    def bwd(g):
        a._accumulate(g.transpose(1, 0, 2).reshape(n, d))

    return _make(out_value, (a,), bwd)


def merge_heads(a) -> Tensor:
    """(H, n, dh) -> (n, H*dh)."""
    a = _coerce(a)
    heads, n, dh = a.value.shape
    out_value = a.value.transpose(1, 0, 2).reshape(n, heads * dh)

    def bwd(g):
        a._accumulate(np.ascontiguousarray(g.reshape(n, heads, dh).transpose(1, 0, 2)))

    return _make(out_value, (a,), bwd)


def attention_core(q, k, v, mask: np.ndarray) -> Tensor:
    """Fused softmax(QK^T/sqrt(dh))V over stacked heads; mask True = visible."""
    q, k, v = _coerce(q), _coerce(k), _coerce(v)
    if not mask.any(axis=1).all():
        raise ValueError("attention mask has a row with no visible positions")
    scale = 1.0 / math.sqrt(q.value.shape[-1])
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    ctx, attn = backend.attn_core_forward(
        np.ascontiguousarray(q.value), np.ascontiguousarray(k.value),
        np.ascontiguousarray(v.value), mask, scale)

    def bwd(g):
        dq, dk, dv = backend.attn_core_backward(
            np.ascontiguousarray(g), q.value, k.value, v.value, attn, scale)
        if q.requires_grad:
            q._accumulate(dq)
        if k.requires_grad:
            k._accumulate(dk)
        if v.requires_grad:
            v._accumulate(dv)

    out = _make(ctx, (q, k, v), bwd)
    return out


def attention_weights(q, k, mask: np.ndarray) -> np.ndarray:
    """Attention matrix only (no grad); for diagnostics and tests."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    _, attn = backend.attn_core_forward(
        np.ascontiguousarray(q), np.ascontiguousarray(k),
        np.ascontiguousarray(np.zeros_like(k)), np.ascontiguousarray(mask, dtype=np.bool_), scale)
    return attn


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    y, mean, rstd = backend.layer_norm_forward(
        np.ascontiguousarray(x.value), gain.value, bias.value, eps)

    def bwd(g):
        dx, dgain, dbias = backend.layer_norm_backward(
            np.ascontiguousarray(g), x.value, gain.value, mean, rstd)
        if x.requires_grad:
            x._accumulate(dx)
        if gain.requires_grad:
            gain._accumulate(dgain)
        if bias.requires_grad:
            bias._accumulate(dbias)

    return _make(y, (x, gain, bias), bwd)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    peak = logits.max(axis=-1, keepdims=True)
    shifted = logits - peak
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def smoothed_cross_entropy(logits, targets, smoothing: float, pad_id=None):
    """Label-smoothed cross entropy, summed over non-pad positions.

    The target distribution puts 1 - smoothing on the gold id and spreads
    smoothing uniformly over the other V - 1 ids. Returns (loss, counted)
    where counted is the number of positions that contributed.
    """
    logits = _coerce(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n_rows, vocab = logits.value.shape
    if vocab < 2:
        raise ValueError("cross entropy needs a vocabulary of at least 2")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must be in [0, 1)")
    logp = log_softmax_rows(logits.value)
    counted = np.ones(n_rows, dtype=bool) if pad_id is None else targets != pad_id
    q_target = 1.0 - smoothing
    q_other = smoothing / (vocab - 1)
    rows = np.arange(n_rows)
    target_logp = logp[rows, targets]
    if smoothing == 0.0:
        per_row = -target_logp
    else:
        per_row = -(q_target * target_logp + q_other * (logp.sum(axis=1) - target_logp))
    loss_value = per_row[counted].sum() if counted.any() else np.asarray(0.0, dtype=logits.value.dtype)

    def bwd(g):
        dz = np.exp(logp)
        dz -= q_other
        dz[rows, targets] -= q_target - q_other
        dz[~counted] = 0.0
        logits._accumulate(dz * g)

    return _make(np.asarray(loss_value, dtype=logits.value.dtype), (logits,), bwd), int(counted.sum())
