"""Command-line entry point: ``rei <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

# thread caps must be in place before numpy loads its BLAS
if os.environ.get("REI_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["REI_THREADS"])

from . import experiment, verify  # noqa: E402


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


def cmd_train(args) -> int:
    report = experiment.run_experiment(args.config, args.out)
    print(report.table())
    print(f"outputs written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    _print(experiment.eval_checkpoint(args.config, args.checkpoint))
    return 0


def cmd_sure_check(args) -> int:
    denoisers = verify.DENOISERS if args.denoiser == "all" else (args.denoiser,)
    reports = [verify.sure_check(args.noise, d, draws=args.draws, seed=args.seed) for d in denoisers]
    _print([r.to_dict() for r in reports])
    return 0 if all(r.passed for r in reports) else 1


def cmd_op_check(args) -> int:
    _print(verify.op_check(args.task, side=args.side))
    return 0


def cmd_gradcheck(args) -> int:
    variants = [args.variant] if args.variant else list(verify.VARIANTS)
    reports = [verify.gradcheck_variant(v, args.instances) for v in variants]
    for r in reports:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.variant:<12}{r.max_relative_error:.2e}  {status}")
    return 0 if all(r.passed for r in reports) else 1


def cmd_sweep(args) -> int:
    reports = experiment.sweep(args.config, args.param, args.values, args.out)
    for row in experiment.emit_figure_data(reports):
        print(f"{row['method']:<12}{row['noise_level']:<10g}{row['psnr_mean']:.2f} ± {row['psnr_std']:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rei", description="Robust equivariant imaging from noisy measurements.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train the configured variants and write a report")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--out", type=Path, default=Path("runs/latest"))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="test PSNR of a checkpoint")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--checkpoint", required=True, type=Path)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sure-check", help="Monte-Carlo bias of the SURE losses")
    s.add_argument("--noise", required=True, choices=sorted(verify.SURE_CASES))
    s.add_argument("--denoiser", default="all", choices=("all",) + verify.DENOISERS)
    s.add_argument("--draws", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sure_check)

    s = sub.add_parser("op-check", help="operator adjoint / pseudo-inverse residuals")
    s.add_argument("--task", required=True, choices=("mri", "inpaint", "ct"))
    s.add_argument("--side", type=int, default=16)
    s.set_defaults(func=cmd_op_check)

    s = sub.add_parser("gradcheck", help="backward vs finite differences for the loss variants")
    s.add_argument("--variant", choices=sorted(verify.VARIANTS))
    s.add_argument("--instances", type=int, default=20)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep", help="train over a grid of noise levels and emit figure data")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--param", required=True, choices=("sigma", "gamma"))
    s.add_argument("--values", required=True, type=float, nargs="+")
    s.add_argument("--out", type=Path, default=Path("runs/sweep"))
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except experiment.ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
