"""The full codec network and its configuration.

One model object owns the lossy transform coder and the residual-pipeline
networks. Inference composition (actual encode/decode orchestration with
rounding, clamping and entropy coding) lives in ``codec``; this module owns
the training-mode forward pass and checkpoint (de)serialization.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import checkpoint as ckpt
from .lossy import LossyCoder
from .residual import (
    FUSIONS,
    MIXTURES,
    FusionNet,
    LossyPreprocNet,
    MixtureParamNet,
    PseudoPreprocNet,
    mixture_interval_likelihood,
)

LOG2 = math.log(2.0)


@dataclass
class CodecConfig:
    """Architecture and coding knobs; serialized into every checkpoint.

    Paper-scale operation uses 196/64 channels; the desk-scale defaults
    keep CPU training tractable. ``latent_window`` bounds the coded latent
    alphabet around its predicted mean; ``hyper_bound`` bounds the
    hyper-latent alphabet symmetrically. Both clamps are applied before
    synthesis, so they can never break losslessness.
    """

    lossy_channels: int = 32
    lossless_channels: int = 16
    mixture_components: int = 3
    mixture: str = "laplace"
    fusion: str = "gated"
    divisor: int = 512
    latent_window: int = 120
    hyper_bound: int = 126
    detach_second_pass: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mixture not in MIXTURES:
            raise ValueError(f"mixture must be one of {MIXTURES}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.divisor < 2:
            raise ValueError("divisor must be >= 2")
        if self.mixture_components < 1:
            raise ValueError("need at least one mixture component")


class DepthCodecModel:
    """Lossy coder + residual pipeline, initialized deterministically from
    the config seed."""

    def __init__(self, config: CodecConfig, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(config.seed)
        n, m = config.lossy_channels, config.lossless_channels
        self.lossy = LossyCoder(n, rng, dtype=dtype)
        self.pseudo_net = PseudoPreprocNet(m, rng, dtype=dtype)
        self.lossy_preproc = LossyPreprocNet(m, rng, dtype=dtype)
        self.fusion = FusionNet(m, rng, kind=config.fusion, dtype=dtype)
        self.param_net = MixtureParamNet(m, config.mixture_components, rng, dtype=dtype)
        self.op_counts = {"lossy_passes": 0, "net_invocations": 0}

    # ---- bookkeeping ----

    def submodules(self):
        return {
            "lossy": self.lossy,
            "pseudo_net": self.pseudo_net,
            "lossy_preproc": self.lossy_preproc,
            "fusion": self.fusion,
            "param_net": self.param_net,
        }

    def named_parameters(self):
        for prefix, mod in self.submodules().items():
            yield from mod.named_parameters(prefix + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def cast(self, dtype):
        for mod in self.submodules().values():
            mod.cast(dtype)
        return self

    def reset_counters(self):
        for k in self.op_counts:
            self.op_counts[k] = 0

    def count(self, key: str, n: int = 1):
        self.op_counts[key] += n

    # ---- training forward ----

    def mixture_field(self, pseudo_units: Tensor, recon_norm: Tensor):
        """Run the residual pipeline networks; inputs may be padded."""
        f_pseudo = self.pseudo_net(pseudo_units)
        f_lossy = self.lossy_preproc(recon_norm)
        fused = self.fusion(f_pseudo, f_lossy)
        return self.param_net(fused)

    def forward_train(self, x_norm: np.ndarray, mask: np.ndarray,
                      levels: np.ndarray, noise: dict):
        """Training-mode pass over a batch of normalized plane pairs.

        x_norm: (B, 2, H, W); mask: (B, 1, H, W) booleans; levels: (2,)
        per-channel integer level counts. ``noise`` provides pinned
        uniform(-0.5, 0.5) arrays under keys y, z, y2, r.

        Returns the scalar loss graph plus per-pixel components
        (bits-per-pixel rates, masked MSE distortions).
        """
        cfg = self.config
        x = Tensor(x_norm)
        b, _, h, w = x.shape
        pixels = float(b * h * w)

        first = self.lossy.forward(x, "train", {"y": noise["y"], "z": noise["z"]})
        recon = first["recon"]
        recon01 = ad.clip(recon, 0.0, 1.0)

        second_in = recon01.detach() if cfg.detach_second_pass else recon01
        y2 = self.lossy.analysis(second_in)
        from .lossy import quantize_latent  # local to avoid cycle at import time
        y2_hat = quantize_latent(y2, "train", noise["y2"])
        recon_sim01 = ad.clip(self.lossy.synthesis(y2_hat), 0.0, 1.0)

        lv = Tensor(np.asarray(levels, dtype=x_norm.dtype).reshape(1, 2, 1, 1))
        pseudo_norm = ad.add(recon01, ad.mul(recon_sim01, -1.0))
        pseudo_units = ad.mul(pseudo_norm, lv)

        weights, means, scales = self.mixture_field(pseudo_units, recon01)

        # pre-round residual in integer units, noise in place of rounding
        resid_norm = ad.add(x, ad.mul(recon, -1.0))
        resid_units = ad.mul(resid_norm, lv)
        resid_for_rate = ad.add(resid_units, Tensor(noise["r"].astype(x_norm.dtype)))
        r5 = ad.reshape(resid_for_rate, (b, 2, 1, h, w))
        p_r = mixture_interval_likelihood(r5, weights, means, scales, cfg.mixture)
        rate_res_bits = ad.mul(ad.tsum(ad.log(p_r)), -1.0 / LOG2)

        m = mask.astype(x_norm.dtype).reshape(b, 1, h, w)
        valid = max(float(m.sum()) * 2.0, 1.0)  # both channels share the mask
        mt = Tensor(m)

        def masked_mse(delta):
            return ad.mul(ad.tsum(ad.mul(ad.mul(delta, delta), mt)), 1.0 / valid)

        d_x = masked_mse(ad.add(x, ad.mul(recon, -1.0)))
        d_r = masked_mse(ad.add(resid_norm, ad.mul(pseudo_norm, -1.0)))

        rate_y = ad.mul(first["rate_y_bits"], 1.0 / pixels)
        rate_z = ad.mul(first["rate_z_bits"], 1.0 / pixels)
        rate_r = ad.mul(rate_res_bits, 1.0 / pixels)
        return {
            "rate_y": rate_y,
            "rate_z": rate_z,
            "rate_res": rate_r,
            "d_x": d_x,
            "d_r": d_r,
            "recon": recon,
            "pseudo_norm": pseudo_norm,
        }

    # ---- checkpoints ----

    def save(self, path, step: int = 0, lr: float = 0.0) -> bytes:
        arrays = {}
        for prefix, mod in self.submodules().items():
            for name, arr in mod.state_arrays().items():
                arrays[f"{prefix}.{name}"] = arr
        meta = {"config": asdict(self.config), "step": step, "lr": lr}
        return ckpt.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path):
        """Returns (model, meta, sha256 digest of the checkpoint file)."""
        arrays, meta, digest = ckpt.load_checkpoint(path)
        config = CodecConfig(**meta["config"])
        model = cls(config)
        for prefix, mod in model.submodules().items():
            sub = {
                name[len(prefix) + 1:]: arr
                for name, arr in arrays.items()
                if name.startswith(prefix + ".")
            }
            mod.load_state_arrays(sub)
        return model, meta, digest
