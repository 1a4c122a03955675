"""Network building blocks: modules, parameters, Adam, gradient checking.

Block internals are fixed project-wide: residual blocks are
conv3x3 -> leaky-ReLU(0.01) -> conv3x3 with a pre-add skip; attention blocks
gate a residual trunk with a sigmoid mask branch. Kernels use Kaiming-uniform
fan-in init, biases start at zero.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LEAKY_SLOPE = 0.01


class Parameter(Tensor):
    """Trainable tensor carrying its Adam moments and step count."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    gain = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class; walks instance attributes to find parameters/submodules."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> dict:
        """name -> ndarray map of parameters plus their Adam moments."""
        out = {}
        for name, p in self.named_parameters():
            out[name] = p.data
            out[name + ".adam_m"] = p.m
            out[name + ".adam_v"] = p.v
        return out

    def load_state_arrays(self, arrays: dict):
        for name, p in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing tensor {name!r}")
            src = arrays[name]
            if tuple(src.shape) != tuple(p.data.shape):
                raise ValueError(
                    f"tensor {name!r} has shape {src.shape}, expected {p.data.shape}"
                )
            p.data = src.astype(p.data.dtype, copy=True)
            if name + ".adam_m" in arrays:
                p.m = arrays[name + ".adam_m"].astype(p.data.dtype, copy=True)
                p.v = arrays[name + ".adam_v"].astype(p.data.dtype, copy=True)

    def cast(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.m = p.m.astype(dtype)
            p.v = p.v.astype(dtype)
        return self


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None, bias=True, dtype=np.float32):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ResidualBlock(Module):
    """x + conv3(leaky(conv3(x))), fixed channel width."""

    def __init__(self, ch, rng, dtype=np.float32):
        self.conv1 = Conv2d(ch, ch, 3, rng, dtype=dtype)
        self.conv2 = Conv2d(ch, ch, 3, rng, dtype=dtype)

    def __call__(self, x):
        h = ad.leaky_relu(self.conv1(x), LEAKY_SLOPE)
        return x + self.conv2(h)


class AttentionBlock(Module):
    """x + trunk(x) * sigmoid(mask(x)); trunk and mask are 3 residual blocks
    each, both closed by a 1x1 conv (so zeroed weights give the identity)."""

    def __init__(self, ch, rng, dtype=np.float32):
        self.trunk = [ResidualBlock(ch, rng, dtype) for _ in range(3)]
        self.trunk_out = Conv2d(ch, ch, 1, rng, dtype=dtype)
        self.mask = [ResidualBlock(ch, rng, dtype) for _ in range(3)]
        self.mask_out = Conv2d(ch, ch, 1, rng, dtype=dtype)

    def __call__(self, x):
        t = x
        for blk in self.trunk:
            t = blk(t)
        t = self.trunk_out(t)
        m = x
        for blk in self.mask:
            m = blk(m)
        gate = ad.sigmoid(self.mask_out(m))
        return x + t * gate


class SubpixelUpsample(Module):
    """3x3 conv to cout*r^2 channels followed by a pixel shuffle."""

    def __init__(self, cin, cout, rng, factor=2, dtype=np.float32):
        self.factor = factor
        self.conv = Conv2d(cin, cout * factor * factor, 3, rng, dtype=dtype)

    def __call__(self, x):
        return ad.pixel_shuffle(self.conv(x), self.factor)


def subpixel_upsample(x, factor: int):
    """Bare channel-to-space rearrangement (no conv)."""
    return ad.pixel_shuffle(x, factor)


def adam_step(param: Parameter, grad: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, in place."""
    param.step += 1
    t = param.step
    param.m = beta1 * param.m + (1.0 - beta1) * grad
    param.v = beta2 * param.v + (1.0 - beta2) * grad * grad
    m_hat = param.m / (1.0 - beta1**t)
    v_hat = param.v / (1.0 - beta2**t)
    param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self):
        for p in self.params:
            if p.grad is not None:
                adam_step(p, p.grad, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def numeric_gradient(fn, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar fn() w.r.t. one tensor."""
    base = tensor.data.copy()
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        tensor.data = flat.reshape(base.shape)
        up = float(fn().data)
        flat[i] = orig - h
        tensor.data = flat.reshape(base.shape)
        down = float(fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    tensor.data = base
    return grad


def grad_check(fn, tensors, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of scalar ``fn()`` over the given tensors.

    Run with float64 data for meaningful tolerances.
    """
    for t in tensors:
        t.zero_grad()
    out = fn()
    out.backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numeric_gradient(fn, t, h)
        diff = np.abs(analytic - numeric)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        worst = max(worst, float((diff / denom).max()))
    return worst
