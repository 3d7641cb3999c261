import argparse
import os
import sys
from pathlib import Path
from typing import List, Optional

import torch

from src.config import Config, load_run_config
from src.errors import ConfigError, ReconUQError
from src.logger import setup_logger
from src.pipeline import cmd_ablation, cmd_eval, cmd_gen_data, cmd_pipeline, cmd_train, cmd_uq

logger = setup_logger("main")

COMMANDS = ("gen-data", "train", "uq", "eval", "pipeline", "ablation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reconuq",
        description="Dose-prediction uncertainty workbench: CT reconstruction vs MC dropout vs deep ensembles",
        epilog="Any config field can be overridden with a dotted flag, e.g. --train.epochs=5",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, default=None, help="RunConfig JSON document")
    parser.add_argument("--output-dir", type=Path, default=None, help="Run directory (overrides output_dir)")
    parser.add_argument("--jobs", type=int, default=None, help="Parallel folds/passes (default RECONUQ_JOBS)")
    parser.add_argument("--ensemble", action="store_true", help="train: also train the deep-ensemble members")
    parser.add_argument("--control", action="store_true",
                        help="ablation: compare the reconstruction-branch model with itself")
    return parser


def _split_overrides(extra: List[str]) -> List[str]:
    overrides = []
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"Unrecognised argument {item!r}; use --section.field=value")
        overrides.append(item[2:])
    return overrides


def run(argv: Optional[List[str]] = None) -> Path:
    args, extra = build_parser().parse_known_args(argv)
    Config.validate()
    torch.set_num_threads(Config.threads())

    overrides = _split_overrides(extra)
    if args.output_dir is not None:
        overrides.append(f"output_dir={args.output_dir}")
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    elif "RECONUQ_JOBS" in os.environ:
        overrides.append(f"jobs={Config.jobs()}")
    config = load_run_config(args.config, overrides)
    logger.info(f"🚀 {args.command}: output in {config.output_dir}, jobs={config.jobs}")

    if args.command == "gen-data":
        return cmd_gen_data(config)
    if args.command == "train":
        return cmd_train(config, ensemble=args.ensemble)
    if args.command == "uq":
        return cmd_uq(config)
    if args.command == "eval":
        return cmd_eval(config)
    if args.command == "ablation":
        return cmd_ablation(config, control=args.control)
    return cmd_pipeline(config)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        result = run(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except ReconUQError as e:
        logger.error(f"❌ {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Internal error: {e}")
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return ReconUQError.exit_code
    logger.info(f"✅ Done: {result}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
