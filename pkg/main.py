#!/usr/bin/env python3
"""
Main entry point for the condot command line.
Usage: condot <command> [--config path.json] [--seed N] [--out dir] [--jobs K] [--print-defaults] [--verbose]
"""

import argparse
import json
import logging
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from config import Config
from condot.backend.run_store import RunStore
from condot.cli.commands import COMMANDS, run_command
from condot.errors import CondotError, ConfigValidationError
from condot.schemas import CommandResponse, ErrorResponse, ExperimentConfig

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool = False):
    """Configure root logging; logs go to stderr so stdout carries only the JSON response."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condot", description="Conditional optimal transport experiments")
    parser.add_argument("command", choices=sorted(COMMANDS), help="Experiment to run")
    parser.add_argument("--config", help="JSON config file; defaults are used when omitted")
    parser.add_argument("--seed", type=int, help="Override the config seed")
    parser.add_argument("--out", help=f"Runs directory (default: {Config.RUNS_DIR})")
    parser.add_argument("--jobs", type=int, default=1, help="Worker processes for independent tasks")
    parser.add_argument("--print-defaults", action="store_true", help="Print the default config and exit")
    parser.add_argument("--verbose", action="store_true", help="Enable debug logging")
    return parser


def load_config(command: str, path: Optional[str], seed: Optional[int]) -> ExperimentConfig:
    """Validate a JSON config file against the command's schema (unknown keys rejected).

    Raises:
        ConfigValidationError: if the file is unreadable, not JSON or fails validation
    """
    config_class, _ = COMMANDS[command]
    try:
        raw = json.loads(Path(path).read_text()) if path else {}
        if seed is not None:
            raw["seed"] = seed
        return config_class.model_validate(raw)
    except OSError as e:
        raise ConfigValidationError(f"Cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigValidationError(f"Config {path} is not valid JSON: {e}")
    except ValidationError as e:
        raise ConfigValidationError(f"Invalid {command} config: {e}")


def error_payload(error: CondotError) -> str:
    return ErrorResponse(error=error.message, error_type=error.error_type,
                         suggestion=error.suggestion).model_dump_json(indent=2)


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and print a CommandResponse (or ErrorResponse) as JSON."""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)

    if args.print_defaults:
        config_class, _ = COMMANDS[args.command]
        print(config_class().model_dump_json(indent=2))
        return 0

    if not Config.validate_config():
        logger.error("Invalid solver configuration in the environment")
        print(error_payload(ConfigValidationError("Solver tolerances or limits from the environment are invalid")))
        return 2

    started = time.perf_counter()
    try:
        config = load_config(args.command, args.config, args.seed)
        if args.jobs < 1:
            raise ConfigValidationError(f"--jobs must be >= 1, got {args.jobs}")
        logger.info(f"Running {args.command} with seed {config.seed}")
        run = run_command(args.command, config, RunStore(args.out), args.jobs)
    except CondotError as e:
        logger.error(f"{args.command} failed: {e.message}")
        print(error_payload(e))
        return e.exit_code

    response = CommandResponse(
        success=True,
        command=args.command,
        run_dir=str(run.path),
        metrics=run.summary,
        timestamp=datetime.now().isoformat(),
        execution_time=f"{time.perf_counter() - started:.2f}s",
    )
    print(response.model_dump_json(indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
