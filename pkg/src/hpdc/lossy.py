"""Lossy transform coder: analysis/synthesis with a hyperprior, no context
model anywhere.

The quantized latent is modeled elementwise as a mean/scale Gaussian whose
parameters come from the decoded hyper-latent; the hyper-latent itself uses
a per-channel learned factorized density (a tiny monotone per-channel MLP
whose sigmoid output is the CDF). Training replaces rounding with additive
uniform noise; inference rounds half away from zero, making both transforms
bit-deterministic for a fixed checkpoint.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special as _sp

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    AttentionBlock,
    Conv2d,
    LEAKY_SLOPE,
    Module,
    Parameter,
    ResidualBlock,
    SubpixelUpsample,
)

SCALE_MIN = 1e-6
PROB_FLOOR = 2.0**-16   # coding floor, matches the range coder's resolution
TRAIN_FLOOR = 1e-9      # training floor: keeps gradients alive on cold models
_EXP_LO = -70.0
_EXP_HI = 60.0


def round_half_away_float(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize_latent(v, mode: str, noise: np.ndarray | None = None):
    """Train mode adds the provided uniform(-0.5, 0.5) noise; infer mode
    rounds half away from zero (exact, non-differentiable)."""
    if mode == "train":
        if noise is None:
            raise ValueError("train-mode quantization needs a noise array")
        return ad.add(v, Tensor(noise.astype(v.dtype if isinstance(v, Tensor) else np.float32)))
    if mode == "infer":
        data = v.data if isinstance(v, Tensor) else np.asarray(v)
        return Tensor(round_half_away_float(data))
    raise ValueError(f"unknown quantization mode {mode!r}")


def normal_cdf(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return 0.5 * _sp.erfc(-x / np.sqrt(x.dtype.type(2.0)))


def gaussian_interval_likelihood(v, mu, sigma, floor: float = PROB_FLOOR):
    """Differentiable p = Phi((v+1/2-mu)/sigma) - Phi((v-1/2-mu)/sigma),
    floored at the given bound."""
    up = ad.gaussian_cdf(ad.div(ad.add(ad.add(v, 0.5), ad.mul(mu, -1.0)), sigma))
    lo = ad.gaussian_cdf(ad.div(ad.add(ad.add(v, -0.5), ad.mul(mu, -1.0)), sigma))
    return ad.clip(ad.add(up, ad.mul(lo, -1.0)), floor, 1.0)


def bits_from_likelihood(p) -> Tensor:
    """Total code length in bits: sum of -log2 p."""
    return ad.mul(ad.tsum(ad.log(p)), -1.0 / math.log(2.0))


class FactorizedDensity(Module):
    """Per-channel monotone scalar CDF from a cascade of affine +
    gated-tanh stages (widths 1-3-3-3-1), trained jointly with the rest."""

    FILTERS = (1, 3, 3, 3, 1)

    def __init__(self, channels: int, rng: np.random.Generator, init_scale: float = 10.0,
                 dtype=np.float32):
        self.channels = channels
        self.mats = []
        self.biases = []
        self.gates = []
        k = len(self.FILTERS) - 1
        scale = init_scale ** (1.0 / k)
        for i in range(k):
            win, wout = self.FILTERS[i], self.FILTERS[i + 1]
            init = math.log(math.expm1(1.0 / scale / wout))
            self.mats.append(Parameter(np.full((channels, wout, win), init, dtype=dtype)))
            self.biases.append(
                Parameter(rng.uniform(-0.5, 0.5, size=(channels, wout)).astype(dtype))
            )
            if i < k - 1:
                self.gates.append(Parameter(np.zeros((channels, wout), dtype=dtype)))

    def cdf(self, t: Tensor) -> Tensor:
        """Evaluate the per-channel CDF at t of shape (B, C, H, W)."""
        b, c, h, w = t.shape
        u = ad.reshape(t, (b, c, h * w, 1))
        for i, (mat, bias) in enumerate(zip(self.mats, self.biases)):
            u = ad.channel_linear(u, ad.softplus(mat), bias)
            if i < len(self.gates):
                gate = ad.reshape(ad.tanh(self.gates[i]), (1, c, 1, -1))
                u = ad.add(u, ad.mul(gate, ad.tanh(u)))
        return ad.reshape(ad.sigmoid(u), (b, c, h, w))

    def interval_likelihood(self, v: Tensor, floor: float = PROB_FLOOR) -> Tensor:
        up = self.cdf(ad.add(v, 0.5))
        lo = self.cdf(ad.add(v, -0.5))
        return ad.clip(ad.add(up, ad.mul(lo, -1.0)), floor, 1.0)

    def cdf_values(self, points: np.ndarray) -> np.ndarray:
        """CDF at the given boundary points, one row per channel.

        points: (C, S) ndarray -> (C, S) ndarray, no gradients. Used to
        build the coding tables; float32 like the weights so encoder and
        decoder agree bit-for-bit.
        """
        c, s = points.shape
        t = Tensor(points.astype(self.mats[0].data.dtype)[None, :, :, None].reshape(1, c, s, 1))
        out = self.cdf(ad.reshape(t, (1, c, s, 1)))
        return out.data.reshape(c, s)


def rate_from_cdf(cdf_fn, values: np.ndarray) -> float:
    """Bits under an arbitrary scalar CDF (test hook and eval utility):
    sum of -log2(max(cdf(v + 1/2) - cdf(v - 1/2), 2^-16))."""
    v = np.asarray(values, dtype=np.float64)
    p = np.maximum(cdf_fn(v + 0.5) - cdf_fn(v - 0.5), PROB_FLOOR)
    return float(-np.log2(p).sum())


class AnalysisNet(Module):
    """Four stride-2 conv stages with residual blocks; attention after
    stages 2 and 4. Total downsampling 16x, output ``ch`` channels."""

    def __init__(self, cin: int, ch: int, rng, dtype=np.float32):
        self.down1 = Conv2d(cin, ch, 3, rng, stride=2, dtype=dtype)
        self.rb1 = ResidualBlock(ch, rng, dtype)
        self.down2 = Conv2d(ch, ch, 3, rng, stride=2, dtype=dtype)
        self.rb2 = ResidualBlock(ch, rng, dtype)
        self.attn2 = AttentionBlock(ch, rng, dtype)
        self.down3 = Conv2d(ch, ch, 3, rng, stride=2, dtype=dtype)
        self.rb3 = ResidualBlock(ch, rng, dtype)
        self.down4 = Conv2d(ch, ch, 3, rng, stride=2, dtype=dtype)
        self.attn4 = AttentionBlock(ch, rng, dtype)

    def __call__(self, x):
        h = ad.leaky_relu(self.down1(x), LEAKY_SLOPE)
        h = self.rb1(h)
        h = ad.leaky_relu(self.down2(h), LEAKY_SLOPE)
        h = self.attn2(self.rb2(h))
        h = ad.leaky_relu(self.down3(h), LEAKY_SLOPE)
        h = self.rb3(h)
        h = self.down4(h)
        return self.attn4(h)


class SynthesisNet(Module):
    """Mirror of AnalysisNet with subpixel upsampling back to ``cout``."""

    def __init__(self, cout: int, ch: int, rng, dtype=np.float32):
        self.attn1 = AttentionBlock(ch, rng, dtype)
        self.rb1 = ResidualBlock(ch, rng, dtype)
        self.up1 = SubpixelUpsample(ch, ch, rng, dtype=dtype)
        self.rb2 = ResidualBlock(ch, rng, dtype)
        self.up2 = SubpixelUpsample(ch, ch, rng, dtype=dtype)
        self.attn3 = AttentionBlock(ch, rng, dtype)
        self.rb3 = ResidualBlock(ch, rng, dtype)
        self.up3 = SubpixelUpsample(ch, ch, rng, dtype=dtype)
        self.rb4 = ResidualBlock(ch, rng, dtype)
        self.up4 = SubpixelUpsample(ch, cout, rng, dtype=dtype)

    def __call__(self, y):
        h = self.rb1(self.attn1(y))
        h = ad.leaky_relu(self.up1(h), LEAKY_SLOPE)
        h = self.rb2(h)
        h = ad.leaky_relu(self.up2(h), LEAKY_SLOPE)
        h = self.rb3(self.attn3(h))
        h = ad.leaky_relu(self.up3(h), LEAKY_SLOPE)
        h = self.rb4(h)
        return self.up4(h)


class HyperAnalysisNet(Module):
    """Two further stride-2 stages: 4x extra downsampling."""

    def __init__(self, ch: int, rng, dtype=np.float32):
        self.conv1 = Conv2d(ch, ch, 3, rng, dtype=dtype)
        self.conv2 = Conv2d(ch, ch, 3, rng, stride=2, dtype=dtype)
        self.conv3 = Conv2d(ch, ch, 3, rng, stride=2, dtype=dtype)

    def __call__(self, y):
        h = ad.leaky_relu(self.conv1(y), LEAKY_SLOPE)
        h = ad.leaky_relu(self.conv2(h), LEAKY_SLOPE)
        return self.conv3(h)


class HyperSynthesisNet(Module):
    """Upsample 4x and emit 2*ch channels: means then raw scales."""

    def __init__(self, ch: int, rng, dtype=np.float32):
        self.conv1 = Conv2d(ch, ch, 3, rng, dtype=dtype)
        self.up1 = SubpixelUpsample(ch, ch, rng, dtype=dtype)
        self.up2 = SubpixelUpsample(ch, ch, rng, dtype=dtype)
        self.conv2 = Conv2d(ch, 2 * ch, 3, rng, dtype=dtype)

    def __call__(self, z):
        h = ad.leaky_relu(self.conv1(z), LEAKY_SLOPE)
        h = ad.leaky_relu(self.up1(h), LEAKY_SLOPE)
        h = ad.leaky_relu(self.up2(h), LEAKY_SLOPE)
        return self.conv2(h)


def split_prior(raw: Tensor, ch: int, out_h: int, out_w: int):
    """Cut the hyper-synthesis output into (mu, sigma); sigma = exp of the
    raw scale, bounded to [1e-6, ~1e26] (exponent clipped for float safety)."""
    h, w = raw.shape[2], raw.shape[3]
    if h < out_h or w < out_w:
        raise ad.ShapeError("hyper synthesis output smaller than latent grid")
    raw = ad.narrow(ad.narrow(raw, 2, 0, out_h), 3, 0, out_w)
    mu = ad.narrow(raw, 1, 0, ch)
    log_sigma = ad.narrow(raw, 1, ch, ch)
    sigma = ad.clip(ad.exp(ad.clip(log_sigma, _EXP_LO, _EXP_HI)), SCALE_MIN, 1e30)
    return mu, sigma


class LossyCoder(Module):
    """The full lossy transform C(.): analysis -> quantize -> synthesis,
    with the hyperprior supplying the latent's Gaussian parameters."""

    def __init__(self, ch: int, rng, cin: int = 2, dtype=np.float32):
        self.ch = ch
        self.analysis = AnalysisNet(cin, ch, rng, dtype)
        self.synthesis = SynthesisNet(cin, ch, rng, dtype)
        self.hyper_analysis = HyperAnalysisNet(ch, rng, dtype)
        self.hyper_synthesis = HyperSynthesisNet(ch, rng, dtype)
        self.density = FactorizedDensity(ch, rng, dtype=dtype)

    def forward(self, x: Tensor, mode: str, noise: dict | None = None):
        """One full pass; returns a dict with latents, priors, recon and the
        two estimated rate terms (bits, summed over the batch)."""
        y = self.analysis(x)
        z = self.hyper_analysis(y)
        z_hat = quantize_latent(z, mode, None if noise is None else noise.get("z"))
        raw = self.hyper_synthesis(z_hat)
        mu, sigma = split_prior(raw, self.ch, y.shape[2], y.shape[3])
        y_hat = quantize_latent(y, mode, None if noise is None else noise.get("y"))
        floor = TRAIN_FLOOR if mode == "train" else PROB_FLOOR
        p_y = gaussian_interval_likelihood(y_hat, mu, sigma, floor)
        p_z = self.density.interval_likelihood(z_hat, floor)
        recon = self.synthesis(y_hat)
        return {
            "y": y, "z": z, "y_hat": y_hat, "z_hat": z_hat,
            "mu": mu, "sigma": sigma, "recon": recon,
            "rate_y_bits": bits_from_likelihood(p_y),
            "rate_z_bits": bits_from_likelihood(p_z),
        }
