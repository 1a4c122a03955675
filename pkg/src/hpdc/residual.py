"""Residual modeling: pseudo-residual guidance, feature fusion, and the
mixture entropy model for the integer residual plane.

The real residual r = x - round(recon) is the only data the decoder cannot
recompute; everything that parameterizes its coding distribution is derived
exclusively from the lossy reconstruction and the pseudo-residual (the
difference between the first and second lossy passes), so the decoder can
rebuild the exact per-pixel mixture field before touching the residual
substream.

Mixtures are K Laplace components by default; a logistic mixture is a
drop-in ablation (same CDF-difference machinery). All coding-table math is
float64 numpy and bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    AttentionBlock,
    Conv2d,
    LEAKY_SLOPE,
    Module,
    ResidualBlock,
    SubpixelUpsample,
)
from .lossy import PROB_FLOOR, SCALE_MIN, _EXP_HI, _EXP_LO
from .rangecoder import cdf_rows_from_pmf

MIXTURES = ("laplace", "logistic")
FUSIONS = ("gated", "concat")


# ---- probability machinery (numpy, float64) ----

def laplace_cdf(t, mu, sigma):
    t, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (t, mu, sigma))
    u = (t - mu) / sigma
    half = 0.5 * np.exp(-np.abs(u))
    return np.where(u < 0, half, 1.0 - half)


def logistic_cdf(t, mu, sigma):
    t, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (t, mu, sigma))
    return _sp.expit((t - mu) / sigma)


def _cdf_fn(kind: str):
    if kind == "laplace":
        return laplace_cdf
    if kind == "logistic":
        return logistic_cdf
    raise ValueError(f"unknown mixture kind {kind!r}")


def mixture_pmf(r, weights, mus, sigmas, kind: str = "laplace"):
    """Exact integer-symbol probability: sum_k w_k (F(r+1/2) - F(r-1/2)).

    Broadcasts over leading axes; the component axis is the last one of
    weights/mus/sigmas. No flooring here (the coding tables apply their own
    floor); values are exact CDF differences.
    """
    cdf = _cdf_fn(kind)
    r = np.asarray(r, dtype=np.float64)[..., None]
    up = cdf(r + 0.5, mus, sigmas)
    lo = cdf(r - 0.5, mus, sigmas)
    return np.sum(np.asarray(weights, dtype=np.float64) * (up - lo), axis=-1)


def folded_pmf_rows(lo: int, hi: int, weights, mus, sigmas, kind: str = "laplace"):
    """Per-row pmf over the alphabet [lo, hi] with all tail mass folded
    into the edge symbols. weights/mus/sigmas: (n, K). Returns (n, S)."""
    cdf = _cdf_fn(kind)
    bounds = np.arange(lo, hi + 2, dtype=np.float64) - 0.5  # S+1 boundaries
    w = np.asarray(weights, dtype=np.float64)[:, :, None]
    m = np.asarray(mus, dtype=np.float64)[:, :, None]
    s = np.asarray(sigmas, dtype=np.float64)[:, :, None]
    f = cdf(bounds[None, None, :], m, s)
    f[..., 0] = 0.0
    f[..., -1] = 1.0
    pm = np.sum(w * np.diff(f, axis=-1), axis=1)
    return pm


def residual_coding_tables(lo: int, hi: int, weights, mus, sigmas,
                           kind: str = "laplace") -> np.ndarray:
    """Quantized cumulative tables, one row per pixel."""
    return cdf_rows_from_pmf(folded_pmf_rows(lo, hi, weights, mus, sigmas, kind))


def estimated_bits(symbols, weights, mus, sigmas, lo: int, hi: int,
                   kind: str = "laplace") -> float:
    """Model estimate sum -log2 p over the folded, floored pmf."""
    pm = folded_pmf_rows(lo, hi, weights, mus, sigmas, kind)
    idx = np.asarray(symbols, dtype=np.int64) - lo
    p = np.maximum(pm[np.arange(idx.size), idx], PROB_FLOOR)
    return float(-np.log2(p).sum())


def mixture_interval_likelihood(r, weights, mus, sigmas, kind: str = "laplace",
                                floor: float = PROB_FLOOR):
    """Differentiable mixture CDF difference at integer-unit residuals.

    r: (B, 2, 1, H, W); weights/mus/sigmas: (B, 2, K, H, W). Returns
    (B, 2, H, W) probabilities summed over components, floored.
    """
    def interval(off):
        u = ad.div(ad.add(ad.add(r, off), ad.mul(mus, -1.0)), sigmas)
        if kind == "laplace":
            half = ad.mul(ad.exp(ad.mul(ad.absolute(u), -1.0)), 0.5)
            return ad.where(u.data < 0, half, ad.add(1.0, ad.mul(half, -1.0)))
        if kind == "logistic":
            return ad.sigmoid(u)
        raise ValueError(f"unknown mixture kind {kind!r}")

    p = ad.tsum(ad.mul(weights, ad.add(interval(0.5), ad.mul(interval(-0.5), -1.0))), axis=2)
    return ad.clip(p, floor, 1.0)


# ---- residual computation ----

@dataclass
class ResidualPlane:
    """Integer residual per split channel with its observed bounds."""

    values: np.ndarray  # (2, H, W) int32
    bounds: tuple       # ((min0, max0), (min1, max1))

    @property
    def shape(self):
        return self.values.shape


def compute_residual(x_int: np.ndarray, recon_units: np.ndarray) -> ResidualPlane:
    """r = x - round_half_away(recon), channelwise, with observed bounds.

    Defined against the rounded reconstruction so the decoder identity
    x = round(recon) + r holds exactly for every float input (a residual
    rounded before subtraction would break on exact-.5 ties).
    """
    x = np.asarray(x_int, dtype=np.int64)
    base = np.sign(recon_units) * np.floor(np.abs(np.asarray(recon_units, dtype=np.float64)) + 0.5)
    r = (x - base.astype(np.int64)).astype(np.int64)
    bounds = tuple(
        (int(r[c].min()), int(r[c].max())) for c in range(r.shape[0])
    )
    return ResidualPlane(r.astype(np.int32), bounds)


def apply_residual(recon_units: np.ndarray, residual: np.ndarray) -> np.ndarray:
    """Decoder half of compute_residual: round(recon) + r."""
    base = np.sign(recon_units) * np.floor(np.abs(np.asarray(recon_units, dtype=np.float64)) + 0.5)
    return base.astype(np.int64) + np.asarray(residual, dtype=np.int64)


# ---- networks ----

class PseudoPreprocNet(Module):
    """Pseudo-residual branch: input conv, four residual blocks, one
    attention block, all at ``ch`` channels and full resolution."""

    def __init__(self, ch: int, rng, cin: int = 2, dtype=np.float32):
        self.conv_in = Conv2d(cin, ch, 3, rng, dtype=dtype)
        self.blocks = [ResidualBlock(ch, rng, dtype) for _ in range(4)]
        self.attn = AttentionBlock(ch, rng, dtype)

    def __call__(self, x):
        h = self.conv_in(x)
        for blk in self.blocks:
            h = blk(h)
        return self.attn(h)


class LossyPreprocNet(Module):
    """Reconstruction branch: two-level encoder/decoder with skip
    concatenation, stride-2 convs down and subpixel convs up. Input dims
    must divide by 4 (the caller pads)."""

    def __init__(self, ch: int, rng, cin: int = 2, dtype=np.float32):
        self.conv_in = Conv2d(cin, ch, 3, rng, dtype=dtype)
        self.rb0 = ResidualBlock(ch, rng, dtype)
        self.down1 = Conv2d(ch, ch, 3, rng, stride=2, dtype=dtype)
        self.rb1 = ResidualBlock(ch, rng, dtype)
        self.down2 = Conv2d(ch, ch, 3, rng, stride=2, dtype=dtype)
        self.rb2 = ResidualBlock(ch, rng, dtype)
        self.up1 = SubpixelUpsample(ch, ch, rng, dtype=dtype)
        self.mix1 = Conv2d(2 * ch, ch, 3, rng, dtype=dtype)
        self.rb3 = ResidualBlock(ch, rng, dtype)
        self.up2 = SubpixelUpsample(ch, ch, rng, dtype=dtype)
        self.mix2 = Conv2d(2 * ch, ch, 3, rng, dtype=dtype)
        self.rb4 = ResidualBlock(ch, rng, dtype)

    def __call__(self, x):
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ad.ShapeError("spatial dims must divide by 4")
        e0 = self.rb0(self.conv_in(x))
        e1 = self.rb1(ad.leaky_relu(self.down1(e0), LEAKY_SLOPE))
        e2 = self.rb2(ad.leaky_relu(self.down2(e1), LEAKY_SLOPE))
        d1 = self.rb3(self.mix1(ad.concat([self.up1(e2), e1], axis=1)))
        d0 = self.rb4(self.mix2(ad.concat([self.up2(d1), e0], axis=1)))
        return d0


class FusionNet(Module):
    """Blend the two branches: a sigmoid gate (from the reconstruction
    features) multiplies the pseudo-residual features, a conv of the
    reconstruction features is added, then residual blocks mix."""

    def __init__(self, ch: int, rng, kind: str = "gated", dtype=np.float32):
        if kind not in FUSIONS:
            raise ValueError(f"unknown fusion kind {kind!r}")
        self.kind = kind
        if kind == "gated":
            self.gate_conv = Conv2d(ch, ch, 3, rng, dtype=dtype)
            self.add_conv = Conv2d(ch, ch, 3, rng, dtype=dtype)
        else:
            self.mix_conv = Conv2d(2 * ch, ch, 3, rng, dtype=dtype)
        self.blocks = [ResidualBlock(ch, rng, dtype) for _ in range(2)]

    def __call__(self, f_pseudo, f_lossy):
        if self.kind == "gated":
            gate = ad.sigmoid(self.gate_conv(f_lossy))
            h = ad.add(ad.mul(f_pseudo, gate), self.add_conv(f_lossy))
        else:
            h = self.mix_conv(ad.concat([f_pseudo, f_lossy], axis=1))
        for blk in self.blocks:
            h = blk(h)
        return h


class ParamHead(Module):
    """Five residual blocks and an output conv emitting 2*K channels."""

    def __init__(self, ch: int, k: int, rng, dtype=np.float32):
        self.blocks = [ResidualBlock(ch, rng, dtype) for _ in range(5)]
        self.conv_out = Conv2d(ch, 2 * k, 3, rng, dtype=dtype)

    def __call__(self, h):
        for blk in self.blocks:
            h = blk(h)
        return self.conv_out(h)


class MixtureParamNet(Module):
    """Three parameter heads (weights, locations, scales) on the fused
    features. Outputs per pixel, per split channel, K mixture triples."""

    def __init__(self, ch: int, k: int, rng, dtype=np.float32):
        self.k = k
        self.weight_head = ParamHead(ch, k, rng, dtype)
        self.mean_head = ParamHead(ch, k, rng, dtype)
        self.scale_head = ParamHead(ch, k, rng, dtype)

    def __call__(self, fused):
        b, _, h, w = fused.shape
        k = self.k

        def comp_shape(t):
            return ad.reshape(t, (b, 2, k, h, w))

        weights = ad.softmax(comp_shape(self.weight_head(fused)), axis=2)
        means = comp_shape(self.mean_head(fused))
        raw = comp_shape(self.scale_head(fused))
        scales = ad.clip(ad.exp(ad.clip(raw, _EXP_LO, _EXP_HI)), SCALE_MIN, 1e30)
        return weights, means, scales


@dataclass
class LmmField:
    """Per-pixel mixture parameters in integer residual units.

    Arrays are (2, K, H, W): mixture weights (softmax-normalized),
    component locations, component scales (>= 1e-6). Never serialized; the
    decoder recomputes it bit-for-bit from decoded latents.
    """

    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray

    def channel_rows(self, c: int):
        """(n_pixels, K) views for one split channel, row-major pixels."""
        k = self.weights.shape[1]
        w = self.weights[c].reshape(k, -1).T
        m = self.means[c].reshape(k, -1).T
        s = self.scales[c].reshape(k, -1).T
        return w, m, s
