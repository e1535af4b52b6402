"""Dense tensors with reverse-mode automatic differentiation.

Every network in this package is expressed through the primitives below.
Tensors wrap float64 numpy arrays; each differentiable op records its
inputs and a backward closure, and ``backward()`` replays the recording
in reverse topological order, accumulating gradients into every tensor
created with ``requires_grad=True``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class GradError(RuntimeError):
    """Raised on invalid backward() usage."""


class Tensor:
    """A dense float64 array plus an optional gradient and tape record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every requires_grad tensor.

        ``self`` must be a scalar. A second call on the same node is
        rejected; build a fresh graph per training step instead.
        """
        if self.data.size != 1:
            raise GradError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise GradError("backward() on a tensor that is not recorded on a tape")
        if self._backward_ran:
            raise GradError("backward() already ran on this node; rebuild the graph")
        self._backward_ran = True

        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _toposort(root: Tensor) -> list:
    """Iterative DFS producing inputs-before-outputs order."""
    order, visited = [], set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if id(parent) not in visited:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            stack.pop()
            order.append(node)
    return order


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g.flags.writeable is False else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(data)
    out = Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return out


# -- arithmetic ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _node(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions follow numpy broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _node(out_data, (a, b), backward)


# -- shape ops ----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return _node(out_data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    out_data = a.data.transpose(axes)

    def backward(g):
        if a.requires_grad:
            inv = None if axes is None else tuple(np.argsort(axes))
            _accumulate(a, g.transpose(inv))

    return _node(out_data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _node(out_data, tensors, backward)


# -- reductions ---------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.shape))

    return _node(out_data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / float(count)))


# -- pointwise nonlinearities --------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; exact-erf form needs scipy and the difference is
    # irrelevant at this scale.
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
            _accumulate(a, g * da)

    return _node(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0))

    return _node(out_data, (a,), backward)


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * out_data)

    return _node(out_data, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _node(out_data, (a,), backward)


# -- normalized ops -----------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; rows are non-negative and sum to one."""
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            _accumulate(a, (g - dot) * out_data)

    return _node(out_data, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _node(out_data, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            gvar = (gx * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
            gmu = -(gx * inv).sum(axis=-1, keepdims=True) + gvar * (-2.0 / d) * xc.sum(axis=-1, keepdims=True)
            _accumulate(a, gx * inv + gvar * 2.0 * xc / d + gmu / d)

    return _node(out_data, (a, gain, bias), backward)


# -- lookup / structural -------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: output shape ids.shape + (dim,)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out_data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            _accumulate(table, gt)

    return _node(out_data, (table,), backward)


def dropout(a: Tensor, rate: float, seed: int, training: bool) -> Tensor:
    """Inverted dropout with an explicit per-call seed; identity at eval."""
    if not training or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    rng = np.random.Generator(np.random.PCG64(seed))
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    out_data = a.data * mask

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _node(out_data, (a,), backward)


# -- losses --------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: np.ndarray, label_smoothing: float = 0.0,
                  reduction: str = "mean") -> Tensor:
    """Negative log-likelihood with uniform label smoothing over the vocab.

    ``logits`` is [T, V]; ``targets`` is an int vector of length T.
    """
    targets = np.asarray(targets)
    t_count, vocab = logits.shape
    if targets.shape != (t_count,):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + x.max(axis=-1, keepdims=True)
    rows = np.arange(t_count)
    nll = lse[:, 0] - x[rows, targets]
    if label_smoothing:
        uniform = lse[:, 0] - x.mean(axis=-1)
        per_tok = (1.0 - label_smoothing) * nll + label_smoothing * uniform
    else:
        per_tok = nll
    total = per_tok.sum()
    scale0 = 1.0 / t_count if reduction == "mean" else 1.0
    out_data = np.asarray(total * scale0)

    def backward(g):
        if not logits.requires_grad:
            return
        probs = np.exp(x - lse)
        q = np.full_like(probs, label_smoothing / vocab)
        q[rows, targets] += 1.0 - label_smoothing
        _accumulate(logits, (probs - q) * (float(g) * scale0))

    return _node(out_data, (logits,), backward)


def soft_cross_entropy(logits: Tensor, soft_targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """Cross-entropy against fixed soft target rows (no gradient to targets)."""
    q = np.asarray(soft_targets, dtype=DTYPE)
    if q.shape != logits.shape:
        raise ShapeError(f"soft targets shape {q.shape} != logits {logits.shape}")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + x.max(axis=-1, keepdims=True)
    per_tok = (q * (lse - x)).sum(axis=-1)
    scale0 = 1.0 / logits.shape[0] if reduction == "mean" else 1.0
    out_data = np.asarray(per_tok.sum() * scale0)

    def backward(g):
        if not logits.requires_grad:
            return
        probs = np.exp(x - lse)
        rowq = q.sum(axis=-1, keepdims=True)
        _accumulate(logits, (rowq * probs - q) * (float(g) * scale0))

    return _node(out_data, (logits,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = sub(a, b)
    return tmean(mul(diff, diff))


# -- convolution ----------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-d convolution, x: [Cin, H, W], w: [Cout, Cin, kh, kw] -> [Cout, Ho, Wo]."""
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin} vs weight {cin_w}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    # im2col: [Cin*kh*kw, Ho*Wo]
    cols = np.empty((cin, kh, kw, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols2 = cols.reshape(cin * kh * kw, ho * wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = wmat @ cols2
    if bias is not None:
        out = out + bias.data[:, None]
    out_data = out.reshape(cout, ho, wo)

    def backward(g):
        gmat = g.reshape(cout, ho * wo)
        if w.requires_grad:
            _accumulate(w, (gmat @ cols2.T).reshape(w.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, gmat.sum(axis=1))
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(cin, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gxp[:, padding:padding + h, padding:padding + wd] if padding else gxp
            _accumulate(x, gx)

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out_data, parents, backward)


def straight_through(value: Tensor, surrogate: Tensor) -> Tensor:
    """Forward ``value``, backward as if it were ``surrogate`` (gradient copy)."""
    if value.shape != surrogate.shape:
        raise ShapeError(f"straight_through shapes differ: {value.shape} vs {surrogate.shape}")
    return add(surrogate, Tensor(value.data - surrogate.data))
