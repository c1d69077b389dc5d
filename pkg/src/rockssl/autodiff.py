"""A small reverse-mode autodiff over numpy arrays.

Only the operators the CNN-attention model needs are here. Every op builds a
new :class:`Tensor` that remembers its parents and a closure that pushes the
output gradient back to them; :func:`backward` walks the graph in reverse
topological order.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import HeadsDontDivide, NonFiniteValue, NonScalarLoss, ShapeMismatch


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # plain numbers take the dtype of the tensor operand so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _result(data, parents, backward, op) -> Tensor:
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    on = x.data > 0  # derivative at exactly 0 is 0

    def bw(g):
        x._accumulate(g * on)

    return _result(np.where(on, x.data, 0).astype(x.dtype), (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def bw(g):
        x._accumulate(g * y * (1 - y))

    return _result(y, (x,), bw, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1 - y * y))

    return _result(y, (x,), bw, "tanh")


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "linear": identity,
}


# shape and reductions

def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        x._accumulate(g.transpose(inv))

    return _result(x.data.transpose(axes), (x,), bw, "transpose")


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum()), (x,), bw, "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def bw(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _result(np.asarray(x.data.mean()), (x,), bw, "mean")


# linear algebra

def matmul(a, b) -> Tensor:
    """Batched ``a @ b`` over the trailing two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` with ``W`` stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"linear input {x.shape} vs weight {weight.shape}")
    out = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatch(f"bias {bias.shape} vs weight {weight.shape}")
        out = add(out, bias)
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor, activation: str = "linear") -> Tensor:
    return ACTIVATIONS[activation](linear(x, weight, bias))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-padded, stride-1 cross-correlation.

    ``x`` is (B, C, H, W), ``weight`` (F, C, kh, kw) with odd kernel extents,
    ``bias`` (F,). Unbatched (C, H, W) input is accepted and returns (F, H, W).
    """
    if x.data.ndim == 3:
        return reshape(conv2d(reshape(x, (1,) + x.shape), weight, bias), (weight.shape[0],) + x.shape[1:])
    B, C, H, W = x.shape
    F, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeMismatch(f"input has {C} channels, kernels expect {Cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch(f"kernel extents must be odd, got {kh}x{kw}")
    if bias.shape != (F,):
        raise ShapeMismatch(f"bias {bias.shape} for {F} filters")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # (B, C, H, W, kh, kw) -> (B*H*W, C*kh*kw)
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(B * H * W, C * kh * kw)
    wmat = weight.data.reshape(F, C * kh * kw)
    out = (cols @ wmat.T + bias.data).reshape(B, H, W, F).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * H * W, F)
        if weight.requires_grad:
            weight._accumulate((g2.T @ cols).reshape(weight.shape))
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, H, W, C, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + H, j:j + W] += dcols[..., i, j].transpose(0, 3, 1, 2)
            x._accumulate(dxp[:, :, ph:ph + H, pw:pw + W])

    return _result(np.ascontiguousarray(out), (x, weight, bias), bw, "conv2d")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if offset.requires_grad:
            offset._accumulate(_unbroadcast(g, offset.shape))
        if x.requires_grad:
            gh = g * gain.data
            x._accumulate(inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                                     - xhat * (gh * xhat).sum(axis=-1, keepdims=True)))

    return _result((xhat * gain.data + offset.data).astype(x.dtype), (x, gain, offset), bw, "layer_norm")


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic scaled dot-product weights ``softmax(q k^T / sqrt(d_head))``."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    return softmax(mul(matmul(q, transpose(k, _swap_last(k.data.ndim))), scale), axis=-1)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def multi_head_attention(x: Tensor, params: Mapping[str, Tensor], heads: int,
                         return_weights: bool = False):
    """Self-attention of ``x`` (B, T, d) or (T, d).

    ``params`` holds ``q.weight``, ``q.bias``, ... ``o.bias`` with (d, d)
    weights. ``k.bias`` is optional: softmax ignores a per-query constant, so
    a key bias never changes the output and its gradient is zero. Each head sees a contiguous ``d / heads`` slice of the projected
    features; heads are concatenated before the output projection.
    """
    squeeze = x.data.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    B, T, d = x.shape
    if heads < 1 or d % heads:
        raise HeadsDontDivide(f"token dimension {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(t):  # (B, T, d) -> (B, h, T, dh)
        return transpose(reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, params["q.weight"], params["q.bias"]))
    k = split(linear(x, params["k.weight"], params.get("k.bias")))
    v = split(linear(x, params["v.weight"], params["v.bias"]))
    w = attention_weights(q, k)
    ctx = reshape(transpose(matmul(w, v), (0, 2, 1, 3)), (B, T, d))
    out = linear(ctx, params["o.weight"], params["o.bias"])
    if squeeze:
        out = reshape(out, (T, d))
    return (out, w) if return_weights else out


def mse(pred: Tensor, target, weight=None) -> Tensor:
    """Mean squared error, optionally over the entries where ``weight`` is nonzero.

    With a 0/1 ``weight`` this is the mean over selected entries only.
    """
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    if weight is None:
        w = None
        denom = diff.size
    else:
        w = np.asarray(weight, dtype=pred.dtype)
        denom = float(w.sum())
        if denom == 0:
            raise ValueError("loss weight selects no entries")
    sq = diff * diff if w is None else w * diff * diff
    value = np.asarray(sq.sum() / denom, dtype=pred.dtype)

    def bw(g):
        gd = (2.0 / denom) * diff if w is None else (2.0 / denom) * w * diff
        pred._accumulate(g * gd)

    return _result(value, (pred,), bw, "mse")


# backward pass

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None):
    """Accumulate d(loss)/d(node) into ``.grad`` for every node reaching ``loss``.

    Gradients are reset first, so each parameter gets exactly one accumulated
    gradient per call. When ``params`` is a mapping, returns a dict of arrays
    with zeros for parameters the loss does not depend on.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteValue(f"loss is {loss.data}")
    leaves = list(params.values()) if isinstance(params, Mapping) else list(params or [])
    for p in leaves:
        p.grad = None
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if isinstance(params, Mapping):
        return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    return None
