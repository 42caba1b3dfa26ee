"""Reverse-mode autodiff on float64 numpy arrays with an explicit tape.

Every differentiable op appends one node to the active ComputationRecord.
backward() walks the record in reverse execution order and accumulates
gradients into the .grad of tensors marked requires_grad. Re-running
backward without clearing .grad accumulates, by design.

All arrays are float64 and C-contiguous; summation orders are fixed by the
underlying numpy kernels, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from ..errors import DomainError, UsageError

Array = np.ndarray

_LOG_CLAMP = 1e-12
_LAYERNORM_EPS = 1e-6
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A float64 array plus optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Thin operator sugar over the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _scalar_error(t: Tensor):
    raise UsageError(f"item() requires a single-element tensor, got shape {t.data.shape}")


class _Node:
    """One executed op: inputs, the produced tensor, and a vjp closure."""

    __slots__ = ("tag", "inputs", "out", "backward_fn")

    def __init__(self, tag: str, inputs: tuple[Tensor, ...], out: Tensor,
                 backward_fn: Callable[[Array], tuple[Array | None, ...]]):
        self.tag = tag
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class ComputationRecord:
    """Tape of nodes in execution order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[ComputationRecord] = []


@contextlib.contextmanager
def recording():
    """Context manager that makes a fresh ComputationRecord the active tape."""
    rec = ComputationRecord()
    _ACTIVE.append(rec)
    try:
        yield rec
    finally:
        _ACTIVE.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _emit(tag: str, out_data: Array, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _ACTIVE and any(_tracked(t) for t in inputs):
        node = _Node(tag, inputs, out, backward_fn)
        out.node = node
        _ACTIVE[-1].nodes.append(node)
    return out


def backward(loss: Tensor, record: ComputationRecord) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every requires_grad leaf.

    The loss must be a scalar produced under `record`. Calling twice without
    zeroing .grad adds the new gradients to the old ones.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or not any(loss.node is n for n in record.nodes):
        raise UsageError("loss was not produced under the given record")
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        in_grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not _tracked(t):
                continue
            if t.node is None:
                # Leaf: persistent accumulation.
                t.grad = g if t.grad is None else t.grad + g
            else:
                key = id(t)
                grads[key] = g if key not in grads else grads[key] + g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g: Array):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g: Array):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _emit("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g: Array):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _emit("mul", out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = a.data * c

    def vjp(g: Array):
        return (g * c,)

    return _emit("scale", out, (a,), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product; operands must have ndim >= 2, batch dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise UsageError("matmul operands must have at least 2 dimensions")
    out = np.matmul(a.data, b.data)

    def vjp(g: Array):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _emit("matmul", out, (a, b), vjp)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise UsageError("transpose needs at least 2 dimensions")
    out = np.swapaxes(a.data, -1, -2).copy()

    def vjp(g: Array):
        return (np.swapaxes(g, -1, -2).copy(),)

    return _emit("transpose", out, (a,), vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)

    def vjp(g: Array):
        return (g.reshape(a.data.shape),)

    return _emit("reshape", out, (a,), vjp)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    out = np.broadcast_to(a.data, shape).copy()

    def vjp(g: Array):
        return (_unbroadcast(g, a.data.shape),)

    return _emit("broadcast_to", out, (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    if not parts:
        raise UsageError("concat needs at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g: Array):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _emit("concat", out, parts, vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx].copy()

    def vjp(g: Array):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _emit("narrow", out, (a,), vjp)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g: Array):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))

    def vjp(g: Array):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.data.shape).copy(),)

    return _emit("mean", np.asarray(out), (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def gelu(a) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF, no tanh approximation."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g: Array):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _emit("gelu", out, (a,), vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g: Array):
        return (g * (1.0 - out * out),)

    return _emit("tanh", out, (a,), vjp)


# ---------------------------------------------------------------------------
# softmax family


def masked_softmax_array(x: Array, mask: Array) -> Array:
    """Row softmax over the last axis restricted to mask==True columns.

    Masked columns get probability exactly 0.0; the row max for the shift is
    taken over unmasked columns only, so held-out column contents cannot
    perturb retained probabilities even at the bit level.
    """
    if np.isnan(x).any():
        raise DomainError("softmax input contains NaN")
    m = np.broadcast_to(mask, x.shape)
    if not m.any(axis=-1).all():
        raise DomainError("softmax row with every column masked")
    neg = np.where(m, x, -np.inf)
    rowmax = neg.max(axis=-1, keepdims=True)
    e = np.exp(neg - rowmax)  # exp(-inf) == 0.0 exactly for masked columns
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax(logits, column_mask) -> Tensor:
    """Softmax over the last axis with masked columns forced to exact zero.

    `column_mask` is boolean, broadcastable against `logits` (a single row
    mask of shape (cols,) applies to every row).
    """
    a = as_tensor(logits)
    if isinstance(column_mask, Tensor):
        column_mask = column_mask.data
    mask = np.asarray(column_mask, dtype=bool)
    y = masked_softmax_array(a.data, mask)

    def vjp(g: Array):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _emit("masked_softmax", y, (a,), vjp)


def softmax(logits) -> Tensor:
    """Unmasked row softmax (the masked kernel with an all-true mask)."""
    a = as_tensor(logits)
    return masked_softmax(a, np.ones(a.shape[-1], dtype=bool))


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x, gain, bias, eps: float = _LAYERNORM_EPS) -> Tensor:
    """Per-row normalization over the last axis: gain * (x - mu)/sigma + bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g: Array):
        dxhat = g * gain.data
        mean_d = dxhat.mean(axis=-1, keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - mean_d - xhat * mean_dx)
        ggain = _unbroadcast(g * xhat, gain.data.shape)
        gbias = _unbroadcast(g, bias.data.shape)
        return gx, ggain, gbias

    return _emit("layer_norm", out, (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# losses


def cross_entropy_logits(logits, labels) -> Tensor:
    """Mean negative log-likelihood from raw logits (stable log-sum-exp)."""
    a = as_tensor(logits)
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    x = a.data.reshape(-1, a.shape[-1])
    if lab.shape[0] != x.shape[0]:
        raise UsageError("labels do not match the logits' leading dimensions")
    if (lab < 0).any() or (lab >= x.shape[1]).any():
        raise UsageError("label index out of range")
    rows = np.arange(x.shape[0])
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    out = np.asarray((lse - x[rows, lab]).mean())

    def vjp(g: Array):
        p = np.exp(x - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[rows, lab] -= 1.0
        return ((g.reshape(-1)[0] / x.shape[0]) * p.reshape(a.data.shape),)

    return _emit("cross_entropy", out, (a,), vjp)


def kl_divergence(p, q) -> Tensor:
    """Mean KL(p || q) over rows, log arguments clamped at 1e-12."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise UsageError("KL operands must share a shape")
    pc = np.maximum(p.data, _LOG_CLAMP)
    qc = np.maximum(q.data, _LOG_CLAMP)
    rows = max(p.data.size // p.shape[-1], 1)
    out = np.asarray((p.data * (np.log(pc) - np.log(qc))).sum() / rows)

    def vjp(g: Array):
        s = g.reshape(-1)[0] / rows
        gp = s * ((np.log(pc) - np.log(qc)) + (p.data > _LOG_CLAMP))
        gq = -s * (p.data / qc) * (q.data > _LOG_CLAMP)
        return gp, gq

    return _emit("kl", out, (p, q), vjp)


def squared_error(pred, target) -> Tensor:
    """Mean squared difference over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n)

    def vjp(g: Array):
        gd = (2.0 * g.reshape(-1)[0] / n) * diff
        return gd, -gd

    return _emit("squared_error", out, (pred, target), vjp)
