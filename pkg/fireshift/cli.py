import argparse
import logging
import sys

from pydantic import ValidationError

from . import __version__
from .core import settings
from .core.batchfire import ConvergenceConfig
from .core.config import ExperimentConfig, TheorySpec, load_config
from .core.errors import ConfigError, FireError, StorageError
from .core.runner import diagnose_files, run

logger = logging.getLogger("CLI")


# ----------------------------------------------------
# COMMANDS
# ----------------------------------------------------

def _cmd_run(args: argparse.Namespace) -> int:
    return run(load_config(args.config))


def _cmd_verify_theory(args: argparse.Namespace) -> int:
    config = ExperimentConfig(
        mode="verify_theory",
        seed=args.seed,
        output_dir=args.output_dir,
        theory=TheorySpec(trials=args.trials, convergence=ConvergenceConfig(seed=args.seed)),
    )
    return run(config)


def _cmd_diagnose(args: argparse.Namespace) -> int:
    path = diagnose_files(args.train_csv, args.val_csv, args.label, args.output_dir, seed=args.seed)
    logger.info(f"✅ Diagnostics written to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fire",
        description="Fisher-information remediation of fragmentation-induced covariate shift",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a config file")
    p_run.add_argument("config", help="path to a key = value config file")
    p_run.set_defaults(handler=_cmd_run)

    p_theory = sub.add_parser("verify-theory", help="randomized KL-bound and convergence checks")
    p_theory.add_argument("--trials", type=int, default=10_000)
    p_theory.add_argument("--seed", type=int, default=0)
    p_theory.add_argument("--output-dir", default="runs/theory")
    p_theory.set_defaults(handler=_cmd_verify_theory)

    p_diag = sub.add_parser("diagnose", help="shift diagnostics of one CSV fragment against a CSV validation set")
    p_diag.add_argument("train_csv")
    p_diag.add_argument("val_csv")
    p_diag.add_argument("--label", required=True, help="label column name")
    p_diag.add_argument("--seed", type=int, default=0)
    p_diag.add_argument("--output-dir", default="runs/diagnose")
    p_diag.set_defaults(handler=_cmd_diagnose)
    return parser


# ----------------------------------------------------
# ENTRY POINT
# ----------------------------------------------------

def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=getattr(logging, settings.FIRE_LOG_LEVEL, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except FireError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except ValidationError as e:
        logger.error(f"❌ Invalid arguments: {e}")
        return ConfigError.exit_code
    except OSError as e:
        logger.error(f"❌ I/O failure: {e}")
        return StorageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
