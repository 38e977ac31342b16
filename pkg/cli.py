"""
Command-line entry point.

    python cli.py phantom-gen --n 50 --seed 7 --out data/phantom
    python cli.py synth-train --variant full --profile desk --data data/phantom --seed 1
    python cli.py synth-eval --checkpoint runs/synth-full-seed1/checkpoints/epoch_020.pt
    python cli.py synth-compare --report baseline=a.csv --report full=b.csv --out runs/compare
    python cli.py diag-run --ffa synthetic:runs/synth-full-seed1/checkpoints/epoch_020.pt
    python cli.py rerun --manifest runs/synth-full-seed1/experiment.json --out runs/replay
"""

import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional

import commands_data
import commands_diag
import commands_synth
from config import PROJECT_NAME, PROJECT_VERSION, settings
from errors import ConfigError, FrameworkError
from models import ErrorDetail, ErrorResponse
from storage import read_experiment_manifest

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
USAGE_EXIT_CODE = 2
FAILURE_EXIT_CODE = 1

cli_logger = logging.getLogger("ffa_synthesis_cli")

HANDLERS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "phantom-gen": commands_data.cmd_phantom_gen,
    "synth-train": commands_synth.cmd_synth_train,
    "synth-eval": commands_synth.cmd_synth_eval,
    "synth-compare": commands_synth.cmd_synth_compare,
    "diag-run": commands_diag.cmd_diag_run,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROJECT_NAME,
        description="Diffusion-guided CFP-to-FFA synthesis: training, evaluation and diagnosis experiments",
    )
    parser.add_argument("--version", action="version", version=f"{PROJECT_NAME} {PROJECT_VERSION}")
    parser.add_argument("--log-level", default=None, help="overrides FFASYN_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True)

    commands_data.register(subparsers)
    commands_synth.register(subparsers)
    commands_diag.register(subparsers)

    rerun = subparsers.add_parser("rerun", help="Replay a command from its experiment manifest")
    rerun.add_argument("--manifest", required=True, help="experiment.json or the run directory holding it")
    rerun.add_argument("--out", default=None, help="write the replay somewhere else")
    rerun.set_defaults(handler=cmd_rerun)
    return parser


def cmd_rerun(args: argparse.Namespace) -> int:
    """
    Re-execute a recorded command with its recorded arguments and config snapshot
    """
    manifest = read_experiment_manifest(args.manifest)
    handler = HANDLERS.get(manifest.command)
    if handler is None:
        raise ConfigError(f"Cannot replay command '{manifest.command}'")

    replay = argparse.Namespace(**manifest.arguments)
    replay.command = manifest.command
    replay.config_snapshot = manifest.config or None
    if args.out:
        replay.out = args.out
    cli_logger.info(f"Replaying {manifest.command} recorded at {manifest.created_at.isoformat()}")
    return handler(replay)


def _emit_error(code: str, message: str, details: Optional[str] = None) -> None:
    payload = ErrorResponse(error=ErrorDetail(code=code, message=message, details=details))
    print(payload.model_dump_json(), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO) if args.log_level else settings.log_level_value,
        format=LOG_FORMAT,
    )

    try:
        return args.handler(args)
    except ConfigError as e:
        cli_logger.error(f"Configuration error: {e.message}")
        _emit_error(e.code, e.message, e.details)
        return USAGE_EXIT_CODE
    except FrameworkError as e:
        cli_logger.error(f"{args.command} failed: {e.message}")
        _emit_error(e.code, e.message, e.details)
        return FAILURE_EXIT_CODE
    except Exception as e:
        cli_logger.error(f"Unhandled exception: {e}", exc_info=True)
        _emit_error("INTERNAL_ERROR", "An unexpected error occurred", str(e))
        return FAILURE_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())
