#!/usr/bin/env python3
"""
mpsim: activation compression for model-parallel transformers.

    python app.py simulate --config configs/simulate_a1.yaml --out report.json
    python app.py predict --coeffs data/coefficients_v100.txt
    python app.py fit --config configs/fit.yaml
    python app.py bench --config configs/bench.yaml
    python app.py spectrum --seed 3

Log verbosity comes from MPSIM_LOG_LEVEL.
"""

import argparse
import logging
import sys
from typing import List, Optional

from utils.config_loader import MODES, ExperimentSpec, apply_overrides, load_config
from utils.errors import SimulatorError
from utils.experiment import run
from utils.logging_setup import configure_logging
from utils.report_generator import ReportGenerator

logger = logging.getLogger("mpsim")


class OneLineParser(argparse.ArgumentParser):
    """Usage errors become a single ``error[E_USAGE]`` line and exit status 2."""

    def error(self, message: str):
        sys.stderr.write(f"error[E_USAGE]: {' '.join(message.split())}\n")
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = OneLineParser(prog="mpsim", description="Activation-compression simulator and cost model")
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", help="YAML experiment config")
    parser.add_argument("--coeffs", help="coefficient file (key = value)")
    parser.add_argument("--seed", type=int, help="64-bit seed")
    parser.add_argument("--out", help="report JSON path")
    parser.add_argument("--trace", help="timeline trace JSON path (simulate)")
    parser.add_argument("--summary", action="store_true", help="print a markdown summary to stdout")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()

    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        sys.stderr.write("error[E_USAGE]: --seed must be an unsigned 64-bit integer\n")
        return 2

    try:
        spec = load_config(args.config) if args.config else ExperimentSpec(mode=args.mode)
        spec = apply_overrides(spec, mode=args.mode, seed=args.seed, coefficients_path=args.coeffs,
                               output=args.out, trace=args.trace)
        report = run(spec)
    except SimulatorError as exc:
        sys.stderr.write(f"error[{exc.code}]: {args.mode}: {' '.join(exc.message.split())}\n")
        return 1
    except OSError as exc:
        sys.stderr.write(f"error[E_IO]: {args.mode}: {exc.strerror or exc} ({exc.filename})\n")
        return 1

    generator = ReportGenerator()
    if args.summary or not spec.output:
        sys.stdout.write(generator.summary_markdown(report) if args.summary else report.to_json())
    return 0


if __name__ == "__main__":
    sys.exit(main())
