"""Desk-scale training and evaluation of the codec objective.

The loss is the coding objective: estimated bits for the hyper-latent,
latent and residual (per pixel), plus weighted mean-square distortions for
the lossy reconstruction and the pseudo-residual gap, both in normalized
units over valid pixels. Invalid pixels are still coded (they carry the
zero sentinel) but contribute nothing to the distortion terms.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bitsplit import msb_levels, pack_normalized, split
from .codec import compress, decompress, hyper_grid
from .depth_io import DepthMap
from .layers import Adam
from .model import CodecConfig, DepthCodecModel

CSV_COLUMNS = ("epoch", "lr", "R_y", "R_z", "R_res", "D_x", "D_r", "L")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Optimization settings. Defaults are the desk-scale profile; the
    paper-scale profile (196/64 channels, 256x64 crops, batch 16) is one
    call to ``paper_scale`` away."""

    alpha: float = 25.0
    beta: float = 25.0
    divisor: int = 512
    lr: float = 1.5e-4
    lr_decay: float = 0.75
    lr_decay_epochs: int = 20
    epochs: int = 50
    batch: int = 4
    crop: tuple = (64, 64)
    lossy_channels: int = 32
    lossless_channels: int = 16
    mixture_components: int = 3
    mixture: str = "laplace"
    fusion: str = "gated"
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.crop[0] % 16 or self.crop[1] % 16:
            raise ValueError("crop dims must divide by 16")

    @classmethod
    def paper_scale(cls, **overrides):
        base = dict(
            lossy_channels=196, lossless_channels=64,
            crop=(64, 256), batch=16, epochs=200,
        )
        base.update(overrides)
        return cls(**base)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_epochs)

    def model_config(self) -> CodecConfig:
        return CodecConfig(
            lossy_channels=self.lossy_channels,
            lossless_channels=self.lossless_channels,
            mixture_components=self.mixture_components,
            mixture=self.mixture,
            fusion=self.fusion,
            divisor=self.divisor,
            seed=self.seed,
        )


def make_noise(rng: np.random.Generator, cfg: CodecConfig, b: int, h: int, w: int) -> dict:
    """Uniform(-0.5, 0.5) arrays for every train-mode quantizer."""
    hy, wy = h // 16, w // 16
    h4, w4 = hyper_grid(hy, wy)
    n = cfg.lossy_channels

    def u(*shape):
        return (rng.random(shape, dtype=np.float64) - 0.5).astype(np.float32)

    return {
        "y": u(b, n, hy, wy),
        "z": u(b, n, h4, w4),
        "y2": u(b, n, hy, wy),
        "r": u(b, 2, h, w),
    }


def loss(model: DepthCodecModel, x_norm: np.ndarray, mask: np.ndarray,
         levels: np.ndarray, noise: dict, alpha: float, beta: float):
    """Full objective on one batch. Returns (scalar loss Tensor, components).

    Components are floats: bits-per-pixel rates and per-pixel MSEs.
    """
    out = model.forward_train(x_norm, mask, levels, noise)
    total = out["rate_y"] + out["rate_z"] + out["rate_res"]
    total = total + alpha * out["d_x"] + beta * out["d_r"]
    comps = {
        "R_y": float(out["rate_y"].data),
        "R_z": float(out["rate_z"].data),
        "R_res": float(out["rate_res"].data),
        "D_x": float(out["d_x"].data),
        "D_r": float(out["d_r"].data),
    }
    comps["L"] = float(total.data)
    if not math.isfinite(comps["L"]):
        raise TrainingError(f"non-finite loss; components: {comps}")
    return total, comps


def _sample_batch(rng: np.random.Generator, dataset, cfg: TrainConfig):
    ch, cw = cfg.crop
    xs, masks = [], []
    divisor = cfg.divisor
    for _ in range(cfg.batch):
        m: DepthMap = dataset[rng.integers(len(dataset))]
        if m.height < ch or m.width < cw:
            raise TrainingError(f"map {m.height}x{m.width} smaller than crop {ch}x{cw}")
        top = int(rng.integers(m.height - ch + 1))
        left = int(rng.integers(m.width - cw + 1))
        sub = DepthMap(
            m.data[top : top + ch, left : left + cw],
            m.mask[top : top + ch, left : left + cw],
            m.bit_depth, m.precision_um,
        )
        planes = split(sub, divisor)
        xs.append(pack_normalized(planes))
        masks.append(sub.mask[None])
    bit_depth = dataset[0].bit_depth
    levels = np.array(
        [max(msb_levels(bit_depth, divisor), 1), max(divisor - 1, 1)], dtype=np.float64
    )
    return np.stack(xs), np.stack(masks), levels


def train(dataset, cfg: TrainConfig, model: DepthCodecModel | None = None,
          metrics_path=None, max_steps: int | None = None, log=None):
    """Optimize on random crops; returns (model, metric rows).

    Deterministic for a fixed seed. Aborts when the loss is non-finite or
    stays above 10x its initial value for three consecutive epochs.
    """
    if model is None:
        model = DepthCodecModel(cfg.model_config())
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(model.parameters(), cfg.lr)
    steps_per_epoch = max(1, math.ceil(len(dataset) / cfg.batch))
    rows = []
    initial_loss = None
    bad_epochs = 0
    step = 0
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        sums = {k: 0.0 for k in ("R_y", "R_z", "R_res", "D_x", "D_r", "L")}
        n_steps = 0
        for _ in range(steps_per_epoch):
            if max_steps is not None and step >= max_steps:
                break
            x, mask, levels = _sample_batch(rng, dataset, cfg)
            noise = make_noise(rng, model.config, *x.shape[:1], *x.shape[2:])
            model.zero_grad()
            total, comps = loss(model, x, mask, levels, noise, cfg.alpha, cfg.beta)
            total.backward()
            opt.step()
            step += 1
            n_steps += 1
            for k in sums:
                sums[k] += comps[k]
        if n_steps == 0:
            break
        row = {"epoch": epoch, "lr": opt.lr}
        row.update({k: sums[k] / n_steps for k in sums})
        rows.append(row)
        if log is not None:
            log(row)
        if initial_loss is None:
            initial_loss = row["L"]
        if row["L"] > 10.0 * initial_loss:
            bad_epochs += 1
            if bad_epochs >= 3:
                raise TrainingError(
                    f"diverged: loss {row['L']:.3f} > 10x initial "
                    f"{initial_loss:.3f} for 3 epochs"
                )
        else:
            bad_epochs = 0
        if max_steps is not None and step >= max_steps:
            break
    if metrics_path is not None:
        write_metrics(metrics_path, rows)
    return model, rows


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in CSV_COLUMNS})


def worker_count() -> int:
    cap = os.environ.get("HPDC_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def evaluate(dataset, model: DepthCodecModel, model_hash: bytes,
             divisor: int | None = None, threads: int | None = None):
    """Compress every map, verify bit-exact decode, report actual coded
    rates (headers included in the overall figure).

    Returns (per-image rows, aggregate dict). Any round-trip mismatch is a
    hard failure.
    """
    if threads is None:
        threads = worker_count()

    def one(depth: DepthMap):
        blob, stats = compress(depth, model, model_hash, divisor)
        restored, _ = decompress(blob, model, model_hash)
        if restored != depth:
            raise TrainingError("round-trip mismatch during evaluation")
        return {
            "R_y": stats["bpp_y"],
            "R_z": stats["bpp_z"],
            "R_lossless": stats["bpp_r"],
            "overall_bpp": stats["bpp_overall"],
            "est_r_bits": stats["est_r"],
            "bits_r": stats["bits_r"],
            "total_bytes": stats["total_bytes"],
        }

    if threads > 1 and len(dataset) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, dataset))
    else:
        rows = [one(d) for d in dataset]
    agg = {
        k: float(np.mean([r[k] for r in rows]))
        for k in ("R_y", "R_z", "R_lossless", "overall_bpp")
    }
    return rows, agg
