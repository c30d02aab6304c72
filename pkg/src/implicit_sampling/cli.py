"""Command-line entry point.

Exit codes: 0 on success, 2 for configuration or usage errors, 3 for
numerical failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from . import experiment
from .errors import BudgetExhausted, ConfigError, NumericalError
from .experiment import ExperimentConfig

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="INI configuration file (defaults apply to missing keys)")
    p.add_argument("--seed", type=int, help="master sampling seed")
    p.add_argument("--workers", type=int, help="worker processes for sampling")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--budget", type=int, help="total forward-solve budget")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="implicit-sampling", description="Implicit sampling for an elliptic inverse problem.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("map", help="find the MAP point (grid cascade by default)")
    _common(p)
    p.add_argument("--single-grid", type=int, metavar="N", help="minimize on one N x N grid only")

    p = sub.add_parser("sample", help="draw a weighted ensemble")
    _common(p)
    p.add_argument("--method", choices=experiment.METHODS)
    p.add_argument("-M", type=int, dest="M", help="number of samples")
    p.add_argument("--hessian", choices=experiment.HESSIAN_KINDS)
    p.add_argument("--dump-hessian", action="store_true", help="write the Hessian as CSV")

    p = sub.add_parser("mcmc", help="run a random-walk Metropolis or ISMAP chain")
    _common(p)
    p.add_argument("--method", choices=("rwm", "ismap"), default="rwm")
    p.add_argument("--steps", type=int)
    p.add_argument("--proposal-std", type=float)
    p.add_argument("--burn-in", type=int)

    p = sub.add_parser("lmap", help="Laplace approximation at the MAP point")
    _common(p)
    p.add_argument("--hessian", choices=experiment.HESSIAN_KINDS)
    p.add_argument("--dump-hessian", action="store_true")

    p = sub.add_parser("compare", help="run every method and write convergence traces")
    _common(p)
    p.add_argument("-M", type=int, dest="M", help="samples per implicit-sampling run")
    p.add_argument("--steps", type=int, help="MCMC steps")
    p.add_argument("--burn-in", type=int)
    p.add_argument("--dump-hessian", action="store_true")

    p = sub.add_parser("spectrum", help="write the prior covariance spectrum")
    _common(p)

    p = sub.add_parser("gradcheck", help="compare the adjoint gradient with finite differences")
    _common(p)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-5)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_ini("")
    overrides = {
        "seed": args.seed,
        "workers": args.workers,
        "out": args.out,
        "method": getattr(args, "method", None) if args.command == "sample" else None,
        "samples": getattr(args, "M", None),
        "hessian": getattr(args, "hessian", None),
        "steps": getattr(args, "steps", None),
        "proposal_std": getattr(args, "proposal_std", None),
        "burn_in": getattr(args, "burn_in", None),
        "budget": getattr(args, "budget", None),
    }
    values = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def run(args) -> int:
    cfg = _config(args)
    cmd = args.command
    if cmd == "map":
        mg = experiment.cmd_map(cfg, single_grid=args.single_grid)
        print(f"phi = {mg.phi:.10g}")
        print(f"fine-equivalent solves = {mg.fine_equivalent_solves:.4g}")
        for r in mg.levels:
            print(f"  grid {r.level}: {r.iterations} iterations, {r.solves} solves")
    elif cmd == "sample":
        ens, report = experiment.cmd_sample(cfg, debug=args.dump_hessian)
        print(f"method = {ens.method}, M = {ens.M}")
        print(f"R_hat = {report['R_hat']:.6g}, ess = {report['ess']:.6g}, rejected = {report['rejected']}")
    elif cmd == "mcmc":
        chain = experiment.cmd_mcmc(cfg, method=args.method)
        print(f"{chain.method}: {chain.steps} states, acceptance rate {chain.acceptance_rate:.3f}")
    elif cmd == "lmap":
        res = experiment.cmd_lmap(cfg, debug=args.dump_hessian)
        print("std(theta_1..5) = " + ", ".join(f"{s:.4g}" for s in res.std[:5]))
    elif cmd == "compare":
        results = experiment.cmd_compare(cfg, debug=args.dump_hessian)
        print("finished: " + ", ".join(results))
    elif cmd == "spectrum":
        basis = experiment.cmd_spectrum(cfg)
        print(f"m = {basis.m}, captured fraction = {basis.captured_fraction:.8f}")
    elif cmd == "gradcheck":
        worst = experiment.cmd_gradcheck(cfg, grid=args.grid, count=args.count)
        print(f"max relative error = {worst:.3e}")
        if worst > args.tol:
            print(f"gradient check failed (tolerance {args.tol:g})", file=sys.stderr)
            return EXIT_NUMERICAL
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, BudgetExhausted) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
