"""Command line: ``particle-em run``, ``particle-em verify``, ``particle-em spectral``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from particle_em import __version__, experiment
from particle_em.errors import ConfigError, OracleError
from particle_em.oracles import SpectralReport


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="particle-em",
        description="Particle alternatives to EM: experiments, verification and spectral tables.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log debug messages.")
    parser.add_argument("-q", "--quiet", action="store_true", help="Only log warnings and errors.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    run_parser = sub.add_parser("run", help="Run the experiment described by a TOML file.")
    run_parser.add_argument("config", help="Experiment TOML file.")
    run_parser.add_argument("--seed", type=int, default=None, help="Override every run's seed.")
    run_parser.add_argument("--workers", type=_positive_int, default=None, help="Parallel replicate workers.")

    verify_parser = sub.add_parser("verify", help="Run one invariant suite and print its margins.")
    verify_parser.add_argument("suite", choices=sorted(experiment.SUITES))

    spectral_parser = sub.add_parser("spectral", help="Spectral radii of the toy mean-field recursions.")
    spectral_parser.add_argument("--dx", dest="d_x", type=_positive_int, required=True, help="Latent dimension D_x.")
    spectral_parser.add_argument("--hmin", type=float, default=0.001)
    spectral_parser.add_argument("--hmax", type=float, default=1.5)
    spectral_parser.add_argument("--steps", type=_positive_int, default=150)
    spectral_parser.add_argument("--output", default=None, help="CSV file; stdout if omitted.")
    return parser


def _run(args: argparse.Namespace) -> int:
    return experiment.run_experiment(args.config, seed=args.seed, workers=args.workers)


def _verify(args: argparse.Namespace) -> int:
    try:
        checks = experiment.verify(args.suite)
    except (ConfigError, OracleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return experiment.EXIT_VERIFY
    for check in checks:
        print(repr(check))
    failed = [c for c in checks if not c.passed]
    print(f"{args.suite}: {len(checks) - len(failed)}/{len(checks)} passed")
    return experiment.EXIT_VERIFY if failed else experiment.EXIT_OK


def _format_row(report: SpectralReport) -> str:
    return ",".join(f"{value:.17g}" for value in report.to_row().values())


def _spectral(args: argparse.Namespace) -> int:
    if not 0 < args.hmin <= args.hmax:
        print("error: need 0 < hmin <= hmax", file=sys.stderr)
        return experiment.EXIT_CONFIG
    grid = np.linspace(args.hmin, args.hmax, args.steps)
    reports = experiment.emit_spectral(args.d_x, grid, args.output)
    if args.output is None:
        print(",".join(SpectralReport.__slots__))
        for report in reports:
            print(_format_row(report))
    else:
        print(f"wrote {len(reports)} rows to {args.output}")
    return experiment.EXIT_OK


COMMANDS = {"run": _run, "verify": _verify, "spectral": _spectral}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.cmd](args)


if __name__ == "__main__":
    sys.exit(main())
