"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation the codec's networks need is defined here as a function
building a small graph of Tensor nodes; calling ``backward()`` on a scalar
result accumulates gradients into every node with ``requires_grad``.

Working precision follows the input arrays: float32 for training and
inference, float64 when the gradient checks drive the same graph at higher
precision. Evaluation order is fixed and single-threaded per graph, which is
what makes encoder/decoder network passes bit-identical.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _sp


class ShapeError(ValueError):
    pass


def _as_float(data):
    a = np.asarray(data)
    if a.dtype == np.float64:
        return a
    return a.astype(np.float32, copy=False)


class Tensor:
    """A value node in the computation graph.

    ``data`` is the numpy payload, ``grad`` (same shape) is filled by
    ``backward``. Non-leaf tensors keep a closure that routes the incoming
    gradient to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_float(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Reverse-mode pass from this node. Defaults to d(self)/d(self)=1."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, k):
        return power(self, k)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---- elementwise arithmetic ----

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def power(a, k: float):
    a = as_tensor(a)
    data = a.data ** k

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * k * a.data ** (k - 1))

    return _make(data, (a,), backward)


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), backward)


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def absolute(a):
    a = as_tensor(a)
    data = np.abs(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    return _make(data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    data = _sp.expit(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), backward)


def softplus(a):
    a = as_tensor(a)
    data = np.logaddexp(a.data.dtype.type(0), a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * _sp.expit(a.data))

    return _make(data, (a,), backward)


def leaky_relu(a, slope: float = 0.01):
    a = as_tensor(a)
    data = np.where(a.data >= 0, a.data, a.data * a.data.dtype.type(slope))

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.where(a.data >= 0, g, g * g.dtype.type(slope)))

    return _make(data, (a,), backward)


def clip(a, lo, hi):
    """Clamp with straight-through gradient inside [lo, hi]."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)

    def backward(g):
        if a.requires_grad:
            inside = (a.data >= lo) & (a.data <= hi)
            a._accumulate(np.where(inside, g, 0.0))

    return _make(data, (a,), backward)


def where(cond, a, b):
    """Select by a constant boolean mask; gradient routes accordingly."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    data = np.where(cond, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.data.shape))

    return _make(data, (a, b), backward)


def gaussian_cdf(a):
    """Standard normal CDF, differentiable."""
    a = as_tensor(a)
    data = 0.5 * _sp.erfc(-a.data / np.sqrt(a.data.dtype.type(2.0)))
    data = data.astype(a.data.dtype, copy=False)

    def backward(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * a.data * a.data) / np.sqrt(a.data.dtype.type(2.0 * np.pi))
            a._accumulate(g * pdf)

    return _make(data, (a,), backward)


# ---- reductions and shape ops ----

def tsum(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(data, (a,), backward)


def concat(tensors, axis: int = 1):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(data, tuple(tensors), backward)


def narrow(a, axis: int, start: int, length: int):
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[idx] = g
            a._accumulate(buf)

    return _make(data, (a,), backward)


def softmax(a, axis: int):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - dot))

    return _make(data, (a,), backward)


# ---- structured ops ----

def _conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    """Cross-correlation of NCHW input with OIHW kernel, zero padding.

    Output spatial size is floor((n + 2*pad - k)/stride) + 1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    B, C, H, W = x.data.shape
    O, CI, KH, KW = weight.data.shape
    if CI != C:
        raise ShapeError(f"kernel expects {CI} input channels, got {C}")
    ho = _conv_out_size(H, KH, stride, padding)
    wo = _conv_out_size(W, KW, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    s0, s1, s2, s3 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        (B, C, KH, KW, ho, wo),
        (s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    data = np.tensordot(cols, weight.data, axes=([1, 2, 3], [1, 2, 3]))  # (B,ho,wo,O)
    data = np.ascontiguousarray(data.transpose(0, 3, 1, 2))
    if bias is not None:
        bias = as_tensor(bias)
        data = data + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if weight.requires_grad:
            dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # (O,C,KH,KW)
            weight._accumulate(dw.astype(weight.data.dtype, copy=False))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            t = np.tensordot(g, weight.data, axes=([1], [0]))  # (B,ho,wo,C,KH,KW)
            dxp = np.zeros_like(xp)
            for u in range(KH):
                for v in range(KW):
                    dxp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += (
                        t[:, :, :, :, u, v].transpose(0, 3, 1, 2)
                    )
            if padding:
                dxp = dxp[:, :, padding : padding + H, padding : padding + W]
            x._accumulate(dxp)

    return _make(data, parents, backward)


def pixel_shuffle(x, factor: int):
    """Rearrange (B, C*r^2, H, W) to (B, C, H*r, W*r), channel-major blocks."""
    x = as_tensor(x)
    B, C, H, W = x.data.shape
    r = factor
    if C % (r * r) != 0:
        raise ShapeError(f"channels {C} not divisible by {r}^2")
    co = C // (r * r)
    data = (
        x.data.reshape(B, co, r, r, H, W)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(B, co, H * r, W * r)
    )

    def backward(g):
        if x.requires_grad:
            gg = (
                g.reshape(B, co, H, r, W, r)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(B, C, H, W)
            )
            x._accumulate(gg)

    return _make(np.ascontiguousarray(data), (x,), backward)


def pixel_unshuffle(x, factor: int):
    """Inverse of pixel_shuffle."""
    x = as_tensor(x)
    B, C, H, W = x.data.shape
    r = factor
    if H % r or W % r:
        raise ShapeError("spatial dims not divisible by factor")
    data = (
        x.data.reshape(B, C, H // r, r, W // r, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(B, C * r * r, H // r, W // r)
    )

    def backward(g):
        if x.requires_grad:
            gg = (
                g.reshape(B, C, r, r, H // r, W // r)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(B, C, H, W)
            )
            x._accumulate(gg)

    return _make(np.ascontiguousarray(data), (x,), backward)


def channel_linear(x, weight, bias):
    """Per-channel dense map on the trailing axis.

    x: (..., C, n, w_in); weight: (C, w_out, w_in); bias: (C, w_out).
    Used by the factorized-density cascade, where each channel owns a tiny
    monotone MLP.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    data = np.einsum("bcni,coi->bcno", x.data, weight.data) + bias.data[None, :, None, :]

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.einsum("bcno,coi->bcni", g, weight.data))
        if weight.requires_grad:
            weight._accumulate(np.einsum("bcno,bcni->coi", g, x.data))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))

    return _make(data, (x, weight, bias), backward)
