"""Command-line entry points: compress, decompress, train, eval, selftest.

Exit codes: 0 ok, 1 usage error, 2 data/format error, 3 verification
failure. HPDC_THREADS caps evaluation parallelism.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .bitsplit import SplitPlanes, merge, split
from .checkpoint import CheckpointError
from .codec import LosslessnessError, compress, decompress
from .depth_io import (
    DepthFormatError,
    DepthMap,
    DepthRangeError,
    load_depth,
    save_depth,
)
from .model import CodecConfig, DepthCodecModel
from .rangecoder import CoderError, DecodeError
from .stream import ChecksumError, StreamFormatError
from .trainer import TrainConfig, TrainingError, evaluate, train
from .synthetic import piecewise_smooth_map

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3

_DATA_ERRORS = (
    DepthFormatError, DepthRangeError, StreamFormatError, CoderError,
    DecodeError, CheckpointError, TrainingError, ValueError, OSError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _detect_format(path: str, flag: str | None) -> str:
    if flag:
        return flag
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        return "pgm16"
    return "raw16"


def _load_model(path: str):
    model, meta, digest = DepthCodecModel.load(path)
    return model, digest


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--d", type=int, default=None, help="bit-split divisor")
    p.add_argument("--alpha", type=float, default=25.0)
    p.add_argument("--beta", type=float, default=25.0)
    p.add_argument("--channels-lossy", type=int, default=32)
    p.add_argument("--channels-lossless", type=int, default=16)
    p.add_argument("--K", type=int, default=3, dest="k")
    p.add_argument("--mixture", choices=("laplace", "logistic"), default="laplace")
    p.add_argument("--fusion", choices=("gated", "concat"), default="gated")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hpdc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    pc = sub.add_parser("compress", help="depth map -> .hpdc stream")
    pc.add_argument("input")
    pc.add_argument("output")
    pc.add_argument("--checkpoint", required=True)
    pc.add_argument("--d", type=int, default=None)
    pc.add_argument("--format", choices=("raw16", "raw32", "pgm16"), default=None)
    pc.add_argument("--precision", type=int, default=1000, help="micrometers per unit")
    pc.add_argument("--no-verify", action="store_true",
                    help="skip the self-decode check")

    pd = sub.add_parser("decompress", help=".hpdc stream -> depth map")
    pd.add_argument("input")
    pd.add_argument("output")
    pd.add_argument("--checkpoint", required=True)
    pd.add_argument("--format", choices=("raw16", "raw32", "pgm16"), default=None)

    pt = sub.add_parser("train", help="train on a directory of depth maps")
    pt.add_argument("data_dir")
    pt.add_argument("checkpoint_out")
    pt.add_argument("--format", choices=("raw16", "raw32", "pgm16"), default="raw16")
    pt.add_argument("--epochs", type=int, default=50)
    pt.add_argument("--batch", type=int, default=4)
    pt.add_argument("--crop", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    pt.add_argument("--lr", type=float, default=1.5e-4)
    pt.add_argument("--metrics", default=None, help="CSV path for per-epoch metrics")
    pt.add_argument("--paper-scale", action="store_true",
                    help="196/64 channels, 256x64 crops, batch 16")
    _add_model_flags(pt)

    pe = sub.add_parser("eval", help="bpp report over a directory, with round-trip checks")
    pe.add_argument("data_dir")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--format", choices=("raw16", "raw32", "pgm16"), default="raw16")
    pe.add_argument("--d", type=int, default=None)

    ps = sub.add_parser("selftest", help="run the built-in verification suites")
    ps.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_compress(args) -> int:
    model, digest = _load_model(args.checkpoint)
    depth = load_depth(args.input, _detect_format(args.input, args.format), args.precision)
    blob, stats = compress(depth, model, digest, args.d)
    with open(args.output, "wb") as fh:
        fh.write(blob)
    print(
        f"{args.input}: {stats['total_bytes']} bytes  "
        f"R_y={stats['bpp_y']:.4f} R_z={stats['bpp_z']:.4f} "
        f"R_lossless={stats['bpp_r']:.4f} overall={stats['bpp_overall']:.4f} bpp"
    )
    if not args.no_verify:
        restored, _ = decompress(blob, model, digest)
        if restored != depth:
            print("verification failed: decode mismatch", file=sys.stderr)
            return EXIT_VERIFY
        print("verified: decode reproduces the input bit-exactly")
    return EXIT_OK


def _cmd_decompress(args) -> int:
    model, digest = _load_model(args.checkpoint)
    with open(args.input, "rb") as fh:
        blob = fh.read()
    depth, _ = decompress(blob, model, digest)
    fmt = args.format or ("raw16" if depth.bit_depth <= 16 else "raw32")
    save_depth(args.output, depth, fmt)
    print(f"{args.output}: {depth.width}x{depth.height}, B={depth.bit_depth}")
    return EXIT_OK


def _load_dir(path: str, fmt: str):
    files = sorted(
        p for p in Path(path).iterdir()
        if p.suffix.lower() in (".hpdm", ".raw", ".pgm", ".bin")
    )
    if not files:
        raise DepthFormatError(f"no depth maps in {path}")
    return [load_depth(str(p), fmt) for p in files]


def _cmd_train(args) -> int:
    dataset = _load_dir(args.data_dir, args.format)
    kwargs = dict(
        alpha=args.alpha, beta=args.beta,
        lr=args.lr, epochs=args.epochs, batch=args.batch,
        crop=tuple(args.crop),
        lossy_channels=args.channels_lossy,
        lossless_channels=args.channels_lossless,
        mixture_components=args.k, mixture=args.mixture, fusion=args.fusion,
        seed=args.seed,
    )
    if args.d is not None:
        kwargs["divisor"] = args.d
    if args.paper_scale:
        for key in ("lossy_channels", "lossless_channels", "crop", "batch"):
            kwargs.pop(key, None)
        cfg = TrainConfig.paper_scale(**kwargs)
    else:
        cfg = TrainConfig(**kwargs)

    def log(row):
        print(
            f"epoch {row['epoch']:4d}  lr={row['lr']:.6g}  L={row['L']:.4f}  "
            f"R_y={row['R_y']:.4f} R_z={row['R_z']:.4f} R_res={row['R_res']:.4f}  "
            f"D_x={row['D_x']:.6f} D_r={row['D_r']:.6f}"
        )

    model, rows = train(dataset, cfg, metrics_path=args.metrics, log=log)
    model.save(args.checkpoint_out, step=len(rows), lr=cfg.lr_at(max(0, len(rows) - 1)))
    print(f"saved checkpoint to {args.checkpoint_out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model, digest = _load_model(args.checkpoint)
    dataset = _load_dir(args.data_dir, args.format)
    rows, agg = evaluate(dataset, model, digest, args.d)
    print(f"{'image':>6}  {'R_y':>8}  {'R_z':>8}  {'R_lossless':>10}  {'overall':>8}")
    for i, r in enumerate(rows):
        print(
            f"{i:>6}  {r['R_y']:8.4f}  {r['R_z']:8.4f}  "
            f"{r['R_lossless']:10.4f}  {r['overall_bpp']:8.4f}"
        )
    print(
        f"{'mean':>6}  {agg['R_y']:8.4f}  {agg['R_z']:8.4f}  "
        f"{agg['R_lossless']:10.4f}  {agg['overall_bpp']:8.4f}"
    )
    return EXIT_OK


def _selftest_suites(seed: int):
    from . import autodiff as ad
    from .layers import AttentionBlock, Conv2d, ResidualBlock, grad_check
    from .rangecoder import build_cdf, decode_symbols, encode_symbols
    from .residual import folded_pmf_rows

    rng = np.random.default_rng(seed)

    def gradients():
        conv = Conv2d(2, 3, 3, rng, stride=2, dtype=np.float64)
        x = ad.Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
        err = grad_check(lambda: ad.tsum(ad.mul(conv(x), conv(x))),
                         [x, conv.weight, conv.bias])
        assert err < 1e-4, f"conv gradient error {err}"
        rb = ResidualBlock(3, rng, dtype=np.float64)
        h = ad.Tensor(rng.normal(size=(1, 3, 5, 5)), requires_grad=True)
        err = grad_check(lambda: ad.tsum(ad.mul(rb(h), rb(h))), [h, rb.conv1.weight])
        assert err < 1e-4, f"residual block gradient error {err}"
        ab = AttentionBlock(2, rng, dtype=np.float64)
        g = ad.Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        err = grad_check(lambda: ad.tsum(ad.mul(ab(g), ab(g))), [g])
        assert err < 1e-4, f"attention block gradient error {err}"

    def split_merge():
        for d in (8, 64, 256, 512, 1024):
            vals = rng.integers(0, 1 << 14, size=(32, 32))
            m = DepthMap.from_values(vals, 14)
            assert merge(split(m, d), m.precision_um) == m

    def coder_roundtrip():
        for _ in range(5):
            size = int(rng.integers(2, 40))
            pmf = rng.random(size)
            pmf /= pmf.sum()
            cdf = build_cdf(pmf)
            syms = rng.integers(0, size, size=2000)
            data = encode_symbols(syms, cdf)
            back = decode_symbols(data, cdf, syms.size)
            assert np.array_equal(back, syms)

    def pmf_normalization():
        w = rng.dirichlet(np.ones(3), size=64)
        mu = rng.normal(0, 5, size=(64, 3))
        sg = rng.uniform(0.1, 10, size=(64, 3))
        pm = folded_pmf_rows(-64, 64, w, mu, sg)
        assert np.all(np.abs(pm.sum(axis=1) - 1.0) < 1e-9)

    return [
        ("gradient-checks", gradients),
        ("split-merge", split_merge),
        ("coder-roundtrip", coder_roundtrip),
        ("pmf-normalization", pmf_normalization),
    ]


def _cmd_selftest(args) -> int:
    failures = 0
    for name, fn in _selftest_suites(args.seed):
        start = time.perf_counter()
        try:
            fn()
            status = "pass"
        except AssertionError as exc:
            status = f"FAIL ({exc})"
            failures += 1
        elapsed = time.perf_counter() - start
        print(f"{name:<20} {status:<30} {elapsed*1000:8.1f} ms")
    return EXIT_OK if failures == 0 else EXIT_VERIFY


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "compress": _cmd_compress,
        "decompress": _cmd_decompress,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "selftest": _cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except (ChecksumError, LosslessnessError) as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
