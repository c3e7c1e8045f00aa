"""
Arbitrage-free discount curve toolkit

Command-line entry point: ingest, synthesize, fit, crossval, reduce,
simulate, compare-naive, sensitivity.
"""
import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import List, Optional

from discount_kernel.core.config import DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_RIDGE, AppConfig, RunConfig
from discount_kernel.core.errors import ConfigError
from discount_kernel.core.logger import setup_logging
from discount_kernel.handlers import EXIT_INPUT, CommandHandlers
from discount_kernel.resources.templates import MessageTemplates

SUBCOMMANDS = ("ingest", "synthesize", "fit", "crossval", "reduce", "simulate", "compare-naive", "sensitivity")


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _at_least(minimum: int):
    def parse(text: str) -> int:
        value = int(text)
        if value < minimum:
            raise argparse.ArgumentTypeError(f"must be at least {minimum}, got {value}")
        return value

    return parse


def build_parser(default_jobs: int = 1) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=_at_least(1), default=default_jobs)
    common.add_argument("--strict", action="store_true", help="fail when any day cannot be fitted")
    common.add_argument("--xlsx", action="store_true", help="also write the run's tables to a workbook")

    kernel = argparse.ArgumentParser(add_help=False)
    kernel.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    kernel.add_argument("--beta", type=float, default=DEFAULT_BETA)
    kernel.add_argument("--ridge", type=float, default=DEFAULT_RIDGE)
    kernel.add_argument("--poly", type=_floats, default=[1.0], help="kernel polynomial coefficients a_0,a_1,...")
    kernel.add_argument("--terminal-weight", type=float, default=None, help="weight of h(0)=1 (inf = hard)")

    systems = argparse.ArgumentParser(add_help=False)
    systems.add_argument("--systems", dest="systems_dir", type=Path, required=True, help="systems bundle")

    reduction = argparse.ArgumentParser(add_help=False)
    reduction.add_argument("--starts", type=_at_least(1), default=8)
    reduction.add_argument("--max-iter", type=_at_least(1), default=2000)

    parser = argparse.ArgumentParser(
        prog="discount-kernel",
        description=MessageTemplates.DESCRIPTION,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("ingest", parents=[common], help="quote CSV -> systems bundle")
    p.add_argument("--csv", dest="csv_path", type=Path, required=True)

    p = sub.add_parser("synthesize", parents=[common, kernel], help="synthetic quote CSV and true model")
    p.add_argument("--n-days", type=_at_least(1), default=20)
    p.add_argument("--contracts", dest="contracts_per_day", type=_at_least(1), default=40)
    p.add_argument("--noise-bp", type=float, default=0.0, help="clean-price noise, basis points of face")

    sub.add_parser("fit", parents=[common, kernel, systems], help="daily kernel ridge fits")

    p = sub.add_parser("crossval", parents=[common, kernel, systems], help="k-fold grid search")
    p.add_argument("--grid", dest="grid_path", type=Path, help='JSON {"alpha": [...], "beta": [...], "ridge": [...]}')
    p.add_argument("--folds", type=_at_least(2), default=5)

    p = sub.add_parser("reduce", parents=[common, reduction], help="quasi-exponential reduction sweep")
    p.add_argument("--curves", dest="curves_dir", type=Path, required=True)
    p.add_argument("--d-min", type=_at_least(0), default=1)
    p.add_argument("--d-max", type=_at_least(0), default=1)

    p = sub.add_parser("simulate", parents=[common], help="calibrate sigma and simulate the factor process")
    p.add_argument("--model", dest="model_path", type=Path, required=True, help="models bundle from reduce")
    p.add_argument("--d", dest="d_max", type=_at_least(0), default=1)
    p.add_argument("--horizon", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1.0 / 252.0)
    p.add_argument("--n-paths", type=_at_least(1), default=1000)
    p.add_argument("--maturities", type=_floats, default=[0.25, 0.5, 1.0])
    p.add_argument("--record-every", type=_at_least(1), default=1)
    p.add_argument("--no-pin-terminal", dest="pin_terminal", action="store_false")

    p = sub.add_parser("compare-naive", parents=[common, kernel, systems, reduction], help="kernel vs naive regression")
    p.add_argument("--init", dest="init_rates", type=_floats, default=[-0.02, -0.06, -0.15])

    p = sub.add_parser("sensitivity", parents=[common, kernel, systems], help="parameter sensitivity slices")
    p.add_argument("--steps", type=_at_least(2), default=5)

    return parser


def parse_run_config(argv: Optional[List[str]] = None, default_jobs: int = 1) -> RunConfig:
    args = vars(build_parser(default_jobs).parse_args(argv))
    if "poly" in args:
        args["poly"] = tuple(args["poly"])
    if args["subcommand"] == "simulate":
        args["d_min"] = 0
    return RunConfig(**args)


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    try:
        # 1. Load Config
        app_config = AppConfig.from_env()
        app_config.validate()

        # 2. Setup Logging
        logger = setup_logging(app_config.log_file, app_config.log_level)

        # 3. Parse and validate the run
        config = parse_run_config(argv, app_config.jobs)
        config.validate()
    except ConfigError as e:
        print(MessageTemplates.INPUT_ERROR.format(error=e), file=sys.stderr)
        return EXIT_INPUT

    logger.info(f"Running {config.subcommand} -> {config.out}")

    # 4. Dispatch
    try:
        return asyncio.run(CommandHandlers(config).run())
    except KeyboardInterrupt:
        print("\nInterrupted")
        return 130
    except Exception:
        logging.exception("Fatal error occurred")
        return 1


if __name__ == "__main__":
    sys.exit(main())
