"""Whole-image compression and decompression.

Encode order: hyper-latent, latent, residual. The decoder rebuilds every
coding distribution from already-decoded substreams (hyper-latent gives the
latent's Gaussian prior; the decoded latent gives the reconstruction; the
reconstruction alone drives the second lossy pass, pseudo-residual and the
mixture field), so exactly two lossy-network passes happen per image on
either side and no network ever runs per pixel.

Latents are clamped into their fixed coding alphabets *before* synthesis,
which keeps the streams decodable with zero side information and cannot
break losslessness: the residual is computed against the clamped
reconstruction and absorbs any clipping.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor
from .bitsplit import SplitPlanes, merge, msb_levels, pack_normalized, split
from .depth_io import DepthMap
from .lossy import normal_cdf, round_half_away_float, split_prior, PROB_FLOOR
from .model import DepthCodecModel
from .rangecoder import (
    RangeDecoder,
    RangeEncoder,
    cdf_rows_from_pmf,
    encode_symbols,
)
from .residual import LmmField, apply_residual, compute_residual, folded_pmf_rows
from .stream import ChecksumError, CodecStream, read_stream, write_stream

PAD_MULTIPLE = 16
_RESIDUAL_CHUNK = 2048
_LATENT_CHUNK = 16384


class LosslessnessError(RuntimeError):
    """Round-trip verification failed."""


def pad_to_multiple(planes: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Edge-replicate a (C, H, W) array up to multiples of ``multiple``."""
    _, h, w = planes.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return planes
    return np.pad(planes, ((0, 0), (0, ph), (0, pw)), mode="edge")


def _down2(n: int) -> int:
    # conv k3 s2 p1: floor((n - 1)/2) + 1
    return (n - 1) // 2 + 1


def hyper_grid(hy: int, wy: int) -> tuple[int, int]:
    return _down2(_down2(hy)), _down2(_down2(wy))


def _fold_rows(cdf_vals: np.ndarray) -> np.ndarray:
    """CDF samples at S+1 boundaries -> pmf rows with tails folded in."""
    f = np.asarray(cdf_vals, dtype=np.float64).copy()
    f[..., 0] = 0.0
    f[..., -1] = 1.0
    return np.maximum(np.diff(f, axis=-1), 0.0)


def _hyper_pmf_rows(model: DepthCodecModel) -> np.ndarray:
    """(C, S) folded pmf of the fixed hyper-latent alphabet per channel."""
    bound = model.config.hyper_bound
    c = model.config.lossy_channels
    pts = np.arange(-bound, bound + 2, dtype=np.float64) - 0.5
    grid = np.broadcast_to(pts, (c, pts.size))
    vals = model.lossy.density.cdf_values(np.ascontiguousarray(grid))
    return _fold_rows(vals)


def _latent_pmf_rows(mu: np.ndarray, sigma: np.ndarray, base: np.ndarray,
                     window: int) -> np.ndarray:
    """(n, 2T+1) folded Gaussian pmf rows for latents near their predicted
    mean. Alphabet of element i is [base_i - T, base_i + T]."""
    offs = np.arange(-window, window + 2, dtype=np.float64) - 0.5
    bounds = base[:, None] + offs[None, :]
    vals = normal_cdf((bounds - mu[:, None]) / sigma[:, None])
    return _fold_rows(vals)


def _estimate_bits(pmf_rows: np.ndarray, symbols: np.ndarray) -> float:
    p = pmf_rows[np.arange(symbols.size), symbols]
    return float(-np.log2(np.maximum(p, PROB_FLOOR)).sum())


def _reconstruct_from_latent(model, y_hat: np.ndarray):
    """synthesis -> padded normalized reconstruction clipped to [0, 1]."""
    recon = model.lossy.synthesis(Tensor(y_hat.astype(np.float32)))
    model.count("net_invocations")
    return np.clip(recon.data, 0.0, 1.0)


def _pseudo_pass(model, recon01: np.ndarray) -> np.ndarray:
    """Second lossy pass C(recon): analysis, round, synthesis."""
    y2 = model.lossy.analysis(Tensor(recon01))
    model.count("net_invocations")
    y2_hat = round_half_away_float(y2.data)
    sim = model.lossy.synthesis(Tensor(y2_hat.astype(np.float32)))
    model.count("net_invocations")
    model.count("lossy_passes")
    return np.clip(sim.data, 0.0, 1.0)


def _mixture_field(model, recon01: np.ndarray, levels: np.ndarray,
                   out_h: int, out_w: int) -> LmmField:
    """Pseudo-residual plus parameter networks; crops to the original size."""
    sim01 = _pseudo_pass(model, recon01)
    pseudo_units = (recon01 - sim01) * levels.reshape(1, 2, 1, 1).astype(np.float32)
    weights, means, scales = model.mixture_field(
        Tensor(pseudo_units.astype(np.float32)), Tensor(recon01)
    )
    model.count("net_invocations", 4)
    return LmmField(
        weights=weights.data[0][:, :, :out_h, :out_w].astype(np.float64),
        means=means.data[0][:, :, :out_h, :out_w].astype(np.float64),
        scales=scales.data[0][:, :, :out_h, :out_w].astype(np.float64),
    )


def _code_residual_channel(field: LmmField, channel: int, lo: int, hi: int,
                           kind: str, symbols: np.ndarray | None,
                           encoder: RangeEncoder | None,
                           decoder: RangeDecoder | None, n: int):
    """Shared encode/decode walk over one channel's per-pixel tables.

    Encoding passes ``symbols`` and ``encoder``; decoding passes
    ``decoder``. Returns (decoded symbols or None, estimated bits).
    """
    w, m, s = field.channel_rows(channel)
    est = 0.0
    out = None if decoder is None else np.empty(n, dtype=np.int64)
    for start in range(0, n, _RESIDUAL_CHUNK):
        stop = min(start + _RESIDUAL_CHUNK, n)
        pm = folded_pmf_rows(lo, hi, w[start:stop], m[start:stop], s[start:stop], kind)
        pm = np.maximum(pm, 0.0)
        cum = cdf_rows_from_pmf(pm)
        if encoder is not None:
            chunk_syms = symbols[start:stop] - lo
            est += _estimate_bits(pm, chunk_syms)
            for i, sym in enumerate(chunk_syms):
                row = cum[i]
                encoder.encode(int(row[sym]), int(row[sym + 1]))
        else:
            for i in range(stop - start):
                out[start + i] = decoder.decode(cum[i])
            est += _estimate_bits(pm, out[start:stop])  # still 0-based here
    if out is not None:
        out += lo
    return out, est


def _encode_rows(symbols: np.ndarray, pmf_rows_fn, n: int, chunk: int):
    """Encode symbols against per-row tables produced lazily per chunk."""
    enc = RangeEncoder()
    est = 0.0
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        pm = pmf_rows_fn(start, stop)
        cum = cdf_rows_from_pmf(pm)
        est += _estimate_bits(pm, symbols[start:stop])
        for i, sym in enumerate(symbols[start:stop]):
            row = cum[i]
            enc.encode(int(row[sym]), int(row[sym + 1]))
    return enc.finish(), est


def _decode_rows(data: bytes, pmf_rows_fn, n: int, chunk: int) -> np.ndarray:
    dec = RangeDecoder(data)
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        cum = cdf_rows_from_pmf(pmf_rows_fn(start, stop))
        for i in range(stop - start):
            out[start + i] = dec.decode(cum[i])
    return out


def compress(depth: DepthMap, model: DepthCodecModel, model_hash: bytes,
             divisor: int | None = None) -> tuple[bytes, dict]:
    """Encode one map; returns (stream bytes, stats dict)."""
    cfg = model.config
    d = cfg.divisor if divisor is None else divisor
    planes = split(depth, d)
    x_units = np.stack([planes.msb, planes.lsb]).astype(np.int64)
    levels = np.array(planes.max_levels(), dtype=np.float64)
    h, w = depth.data.shape

    xn = pack_normalized(planes)
    xp = pad_to_multiple(xn)
    hp, wp = xp.shape[1], xp.shape[2]
    model.reset_counters()

    # pass 1: analysis, hyperprior, quantize-with-clamp, synthesis
    y = model.lossy.analysis(Tensor(xp[None]))
    model.count("net_invocations")
    z = model.lossy.hyper_analysis(y)
    model.count("net_invocations")
    zb = cfg.hyper_bound
    z_hat = np.clip(round_half_away_float(z.data), -zb, zb).astype(np.int64)

    raw = model.lossy.hyper_synthesis(Tensor(z_hat.astype(np.float32)))
    model.count("net_invocations")
    hy, wy = y.shape[2], y.shape[3]
    mu_t, sigma_t = split_prior(raw, cfg.lossy_channels, hy, wy)
    mu = mu_t.data.reshape(-1).astype(np.float64)
    sigma = sigma_t.data.reshape(-1).astype(np.float64)
    base = round_half_away_float(mu).astype(np.int64)

    tw = cfg.latent_window
    y_round = round_half_away_float(y.data.reshape(-1)).astype(np.int64)
    y_hat = np.clip(y_round, base - tw, base + tw)
    y_grid = y_hat.reshape(1, cfg.lossy_channels, hy, wy)

    recon01 = _reconstruct_from_latent(model, y_grid)
    model.count("lossy_passes")

    recon_units = recon01[0][:, :h, :w].astype(np.float64) * levels.reshape(2, 1, 1)
    resid = compute_residual(x_units, recon_units)

    field = _mixture_field(model, recon01, levels, h, w)

    # substream 1: hyper-latent, fixed per-channel tables
    z_pm = _hyper_pmf_rows(model)
    z_cum = cdf_rows_from_pmf(z_pm)
    z_flat = z_hat.reshape(z_hat.shape[1], -1)  # (C, h4*w4)
    z_syms = (z_flat + zb).astype(np.int64)
    enc = RangeEncoder()
    est_z = 0.0
    for c in range(z_syms.shape[0]):
        row = z_cum[c]
        est_z += _estimate_bits(
            np.broadcast_to(z_pm[c], (z_syms.shape[1], z_pm.shape[1])), z_syms[c]
        )
        for sym in z_syms[c]:
            enc.encode(int(row[sym]), int(row[sym + 1]))
    z_bytes = enc.finish()

    # substream 2: latent under its Gaussian prior
    y_syms = (y_hat - (base - tw)).astype(np.int64)

    def y_rows(a, b):
        return _latent_pmf_rows(mu[a:b], sigma[a:b], base[a:b], tw)

    y_bytes, est_y = _encode_rows(y_syms, y_rows, y_syms.size, _LATENT_CHUNK)

    # substream 3: residual, channel 0 then channel 1
    enc_r = RangeEncoder()
    est_r = 0.0
    n_px = h * w
    for c in range(2):
        lo, hi = resid.bounds[c]
        _, est = _code_residual_channel(
            field, c, lo, hi, cfg.mixture,
            resid.values[c].reshape(-1).astype(np.int64), enc_r, None, n_px,
        )
        est_r += est
    r_bytes = enc_r.finish()

    stream = CodecStream(
        width=w, height=h, bit_depth=depth.bit_depth, divisor=d,
        precision_um=depth.precision_um, checkpoint_hash=model_hash,
        residual_bounds=resid.bounds, padded_width=wp, padded_height=hp,
        hyper_bytes=z_bytes, latent_bytes=y_bytes, residual_bytes=r_bytes,
    )
    blob = write_stream(stream)

    total_bits = 8.0 * len(blob)
    stats = {
        "width": w, "height": h,
        "bits_z": 8 * len(z_bytes), "bits_y": 8 * len(y_bytes),
        "bits_r": 8 * len(r_bytes),
        "est_z": est_z, "est_y": est_y, "est_r": est_r,
        "total_bytes": len(blob),
        "bpp_y": 8 * len(y_bytes) / (w * h),
        "bpp_z": 8 * len(z_bytes) / (w * h),
        "bpp_r": 8 * len(r_bytes) / (w * h),
        "bpp_overall": total_bits / (w * h),
        "lossy_passes": model.op_counts["lossy_passes"],
        "net_invocations": model.op_counts["net_invocations"],
    }
    return blob, stats


def decompress(blob: bytes, model: DepthCodecModel, model_hash: bytes) -> tuple[DepthMap, dict]:
    """Decode a stream produced by ``compress`` with the same checkpoint."""
    cfg = model.config
    s = read_stream(blob)
    if s.checkpoint_hash != model_hash:
        raise ChecksumError(
            "stream was encoded with a different checkpoint "
            f"({s.checkpoint_hash.hex()[:16]}... vs {model_hash.hex()[:16]}...)"
        )
    h, w = s.height, s.width
    hp, wp = s.padded_height, s.padded_width
    hy, wy = hp // PAD_MULTIPLE, wp // PAD_MULTIPLE
    h4, w4 = hyper_grid(hy, wy)
    model.reset_counters()

    # hyper-latent
    zb = cfg.hyper_bound
    z_pm = _hyper_pmf_rows(model)
    z_cum = cdf_rows_from_pmf(z_pm)
    n_spatial = h4 * w4
    dec = RangeDecoder(s.hyper_bytes)
    z_hat = np.empty((cfg.lossy_channels, n_spatial), dtype=np.int64)
    for c in range(cfg.lossy_channels):
        row = z_cum[c]
        for i in range(n_spatial):
            z_hat[c, i] = dec.decode(row)
    z_hat = (z_hat - zb).reshape(1, cfg.lossy_channels, h4, w4)

    raw = model.lossy.hyper_synthesis(Tensor(z_hat.astype(np.float32)))
    model.count("net_invocations")
    mu_t, sigma_t = split_prior(raw, cfg.lossy_channels, hy, wy)
    mu = mu_t.data.reshape(-1).astype(np.float64)
    sigma = sigma_t.data.reshape(-1).astype(np.float64)
    base = round_half_away_float(mu).astype(np.int64)
    tw = cfg.latent_window

    def y_rows(a, b):
        return _latent_pmf_rows(mu[a:b], sigma[a:b], base[a:b], tw)

    n_y = cfg.lossy_channels * hy * wy
    y_syms = _decode_rows(s.latent_bytes, y_rows, n_y, _LATENT_CHUNK)
    y_hat = (y_syms + base - tw).reshape(1, cfg.lossy_channels, hy, wy)

    recon01 = _reconstruct_from_latent(model, y_hat)
    model.count("lossy_passes")
    levels = np.array(
        [max(msb_levels(s.bit_depth, s.divisor), 1), max(s.divisor - 1, 1)],
        dtype=np.float64,
    )
    recon_units = recon01[0][:, :h, :w].astype(np.float64) * levels.reshape(2, 1, 1)

    field = _mixture_field(model, recon01, levels, h, w)

    dec_r = RangeDecoder(s.residual_bytes)
    n_px = h * w
    channels = []
    for c in range(2):
        lo, hi = s.residual_bounds[c]
        syms, _ = _code_residual_channel(
            field, c, lo, hi, cfg.mixture, None, None, dec_r, n_px
        )
        channels.append(syms.reshape(h, w))
    residual = np.stack(channels)

    plane_vals = apply_residual(recon_units, residual)
    planes = SplitPlanes(plane_vals[0], plane_vals[1], s.divisor, s.bit_depth)
    depth = merge(planes, s.precision_um)
    stats = {
        "lossy_passes": model.op_counts["lossy_passes"],
        "net_invocations": model.op_counts["net_invocations"],
    }
    return depth, stats


def roundtrip_check(depth: DepthMap, model: DepthCodecModel, model_hash: bytes,
                    divisor: int | None = None) -> dict:
    """Compress, decompress, and demand bit-exact equality."""
    blob, stats = compress(depth, model, model_hash, divisor)
    restored, _ = decompress(blob, model, model_hash)
    if restored != depth:
        raise LosslessnessError("decode does not reproduce the input bit-exactly")
    return stats
