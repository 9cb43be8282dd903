"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds a fresh node holding its parents and a closure that pushes
the output gradient back to them. Node ids grow monotonically, so sorting the
reachable nodes by descending id is a valid reverse topological order.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()


class DimensionError(ValueError):
    """Operand shapes do not fit the operation."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "node_id", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_ids)
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self.op or 'leaf'})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str,
          rule: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, requires_grad=_needs_grad(*parents), _parents=parents, op=op)
    if out.requires_grad:
        out._backward = rule
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.node_id in nodes or not node.requires_grad:
            continue
        nodes[node.node_id] = node
        stack.extend(node._parents)
    # interior nodes get a fresh buffer every pass; leaves accumulate
    for node in nodes.values():
        if node._parents:
            node.grad = None
    loss._accumulate(np.ones_like(loss.data))
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def rule(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), "add", rule)


def neg(a: Tensor) -> Tensor:
    def rule(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), "neg", rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def rule(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), "mul", rule)


def power(a: Tensor, p: float) -> Tensor:
    def rule(g):
        a._accumulate(g * p * a.data ** (p - 1))

    return _make(a.data ** p, (a,), "pow", rule)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def rule(g):
        a._accumulate(g * out_data)

    return _make(out_data, (a,), "exp", rule)


def log(a: Tensor) -> Tensor:
    def rule(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), "log", rule)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def rule(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, (a,), "relu", rule)


# ----------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(data, (a,), "sum", rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -------------------------------------------------------------------- layout

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def rule(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), "reshape", rule)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def rule(g):
        a._accumulate(g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), "transpose", rule)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def rule(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    return _make(data, tuple(tensors), "concat", rule)


def take(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """Select one index along ``axis`` (that axis is dropped)."""
    data = np.take(a.data, index, axis=axis)

    def rule(g):
        full = np.zeros_like(a.data)
        slicer = [slice(None)] * a.ndim
        slicer[axis] = index
        full[tuple(slicer)] = g
        a._accumulate(full)

    return _make(data, (a,), "take", rule)


# ------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
            a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def rule(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), "matmul", rule)


# ------------------------------------------------------------------- neural

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), "softmax", rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each vector along the last axis, then scale by gamma and shift by beta."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm width {d} does not match gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std

    def rule(g):
        lead = tuple(range(x.ndim - 1))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=lead))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gamma.data
            gx = inv_std * (gx - gx.mean(axis=-1, keepdims=True)
                            - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(gx)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm", rule)


def dropout(x: Tensor, p: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout. ``rng`` is any object with ``random(shape)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def rule(g):
        x._accumulate(g * keep)

    return _make(x.data * keep, (x,), "dropout", rule)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Negative log-likelihood of ``label`` under softmax(logits) for a 1-D logit vector."""
    if logits.ndim != 1:
        raise DimensionError(f"cross_entropy expects a 1-D logit vector, got {logits.shape}")
    n = logits.shape[0]
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range for {n} classes")
    shifted = logits.data - logits.data.max()
    lse = np.log(np.exp(shifted).sum())
    loss = lse - shifted[label]

    def rule(g):
        p = np.exp(shifted - lse)
        p[label] -= 1.0
        logits._accumulate(g * p)

    return _make(np.asarray(loss), (logits,), "cross_entropy", rule)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    # (n*oh*ow, c*kh*kw)
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw), oh, ow


def _col2im(cols: np.ndarray, shape, kh, kw, stride, pad, oh, ow) -> np.ndarray:
    n, c, h, w = shape
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W); weight: (O, C, kh, kw); bias: (O,)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    n = x.shape[0]
    o, _, kh, kw = weight.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    data = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if weight.requires_grad:
            weight._accumulate((gmat.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0))
        if x.requires_grad:
            x._accumulate(_col2im(gmat @ wmat, x.shape, kh, kw, stride, padding, oh, ow))

    return _make(data, parents, "conv2d", rule)

