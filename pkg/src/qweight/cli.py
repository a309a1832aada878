"""Command-line front end.

Exit codes: 0 success, 1 verification failure or corrupt container, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .bench import bench_matvec
from .container import (ContainerError, decode_packed_layer, load_calibration, load_weights, read_packed_layer,
                        save_f32, write_packed_layer)
from .engine import matvec_pipelined
from .metrics import (group_range_report, quant_error_stats, storage_bits_actual, write_bits_csv,
                      write_error_stats_csv, write_group_range_csv)
from .pipeline import quantize_layer
from .synth import gaussian_weights, plant_outliers
from .verify import verify_layer

log = logging.getLogger("qweight")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _weights(args):
    if args.weights:
        return load_weights(args.weights, args.rows, args.cols).data
    log.info("no --weights given, using seeded Gaussian weights (seed %d)", args.seed)
    return gaussian_weights(args.rows, args.cols, args.seed)


def cmd_synth(args) -> int:
    w = gaussian_weights(args.rows, args.cols, args.seed)
    if args.planted_ratio > 0:
        w, _ = plant_outliers(w, args.planted_ratio, args.planted_scale, seed=args.seed)
    save_f32(args.out, w)
    print(f"wrote {args.rows}x{args.cols} weights to {args.out}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    if args.g1 != 16:
        raise UsageError("the packed layout uses 16-channel groups; --g1 must be 16")
    if args.n2 != 4:
        raise UsageError("the packed layout stores 4/3/3-bit scale codes; --n2 must be 4")
    w = _weights(args)
    calib = load_calibration(args.calib, args.cols)
    if args.calib is None:
        print("calibration: none given, using identity (all ones)")
    layer = quantize_layer(w, calib, alpha=args.alpha, g2=args.g2, n2=args.n2,
                           outlier_ratio=args.outlier_ratio)
    write_packed_layer(layer, args.out)
    plan = layer.plan
    print(f"wrote {args.out}: {plan.n2} 2-bit + {plan.n4} 4-bit channels, "
          f"{plan.pad2 + plan.pad4} pads, {layer.csr.nnz} outliers")
    print(storage_bits_actual(layer).format())
    return EXIT_OK


def cmd_verify(args) -> int:
    blob = Path(args.packed).read_bytes()
    try:
        layer = decode_packed_layer(blob)
    except ContainerError as e:
        print(f"FAIL container [{e.section}]: {e}")
        return EXIT_FAIL
    c = layer.config
    if (args.rows, args.cols) != (c.oc, c.ic):
        raise UsageError(f"dimension mismatch: --rows/--cols {args.rows}x{args.cols} "
                         f"but the layer is {c.oc}x{c.ic}")
    w = load_weights(args.weights, args.rows, args.cols).data
    results = verify_layer(layer, w, blob, seed=args.seed)
    for r in results:
        print(r)
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def cmd_matvec(args) -> int:
    layer = read_packed_layer(args.packed)
    x = load_weights(args.activation, 1, layer.config.ic).data[0]
    res = matvec_pipelined(layer, x, args.workers)
    save_f32(args.out, res.y)
    print(f"wrote {res.y.size} outputs to {args.out} ({res.wall_ns / 1e6:.3f} ms)")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.packed:
        layer = read_packed_layer(args.packed)
    else:
        layer = quantize_layer(gaussian_weights(args.rows, args.cols, args.seed),
                               alpha=args.alpha, g2=args.g2, outlier_ratio=args.outlier_ratio)
    x = np.random.default_rng(args.seed).standard_normal(layer.config.ic).astype(np.float32)
    report = bench_matvec(layer, x, args.repetitions, args.workers)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    print(f"pipelined/oracle wall ratio {report.ratio:.3f}, "
          f"{report.tokens_per_second():.1f} matvecs/s, {report.bytes_touched} bytes touched")
    return EXIT_OK


def cmd_report(args) -> int:
    layer = read_packed_layer(args.packed)
    c = layer.config
    if (args.rows, args.cols) != (c.oc, c.ic):
        raise UsageError(f"dimension mismatch: layer is {c.oc}x{c.ic}")
    w = load_weights(args.weights, args.rows, args.cols).data
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ranges = group_range_report(w, layer.plan)
    write_group_range_csv(out / "group_range.csv", ranges)
    write_error_stats_csv(out / "error_stats.csv", quant_error_stats(w, layer))
    write_bits_csv(out / "bits.csv", storage_bits_actual(layer))
    counts, edges = ranges.histogram(args.bins)
    for n, a, b in zip(counts, edges[:-1], edges[1:]):
        print(f"[{a:9.4f}, {b:9.4f})  {n}")
    print(f"wrote group_range.csv, error_stats.csv, bits.csv to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qweight", description="Mixed 2/4-bit weight quantization toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def dims(sp, required=True):
        sp.add_argument("--rows", type=int, required=required, help="output channels")
        sp.add_argument("--cols", type=int, required=required, help="input channels")

    def quant_opts(sp):
        sp.add_argument("--alpha", type=float, default=0.25, help="fraction of 4-bit channels")
        sp.add_argument("--g1", type=int, default=16)
        sp.add_argument("--g2", type=int, default=16)
        sp.add_argument("--n2", type=int, default=4)
        sp.add_argument("--outlier-ratio", type=float, default=0.002)

    sp = sub.add_parser("synth", help="write seeded Gaussian weights")
    dims(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--planted-ratio", type=float, default=0.0)
    sp.add_argument("--planted-scale", type=float, default=10.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("quantize", help="quantize a weight matrix into a packed layer")
    dims(sp)
    quant_opts(sp)
    sp.add_argument("--weights", help="raw little-endian float32 file (synthetic if omitted)")
    sp.add_argument("--calib", help="Hessian-inverse diagonal, float32 per input channel")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("verify", help="check a packed layer against its source weights")
    dims(sp)
    sp.add_argument("--packed", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("matvec", help="multiply a packed layer by an activation vector")
    sp.add_argument("--packed", required=True)
    sp.add_argument("--activation", required=True)
    sp.add_argument("--workers", type=int, default=4)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_matvec)

    sp = sub.add_parser("bench", help="time oracle vs pipelined matvec, print CSV")
    dims(sp, required=False)
    quant_opts(sp)
    sp.add_argument("--packed")
    sp.add_argument("--workers", type=int, default=4)
    sp.add_argument("--repetitions", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("report", help="write group-range, error and bit CSVs")
    dims(sp)
    sp.add_argument("--packed", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--bins", type=int, default=32)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("QWEIGHT_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "bench" and not args.packed and (args.rows is None or args.cols is None):
        parser.error("bench needs --packed or both --rows and --cols")
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be at least 1")
    try:
        return args.func(args)
    except ContainerError as e:
        print(f"error: corrupt container [{e.section}]: {e}", file=sys.stderr)
        return EXIT_FAIL
    except (UsageError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
