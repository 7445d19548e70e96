"""Command-line entry point: `rdlab <subcommand> ...`

Exit codes: 0 success, 1 domain failure, 2 usage or config error.
"""
import argparse
import json
import logging
import shlex
import sys
from typing import List, Optional

from rdlab import __version__, config
from rdlab.commands import evaluation, identities, training
from rdlab.utils.common import EXIT_FAILURE, EXIT_USAGE, LabError, error_payload, get_logger, handle_exception

logger = get_logger("cli")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rdlab",
        description="Desk-scale lab for conditional-source-entropy regularization of learned compression",
    )
    parser.add_argument("--version", action="version", version=f"rdlab {__version__}")
    parser.add_argument("--log-level", default=config.LOG_LEVEL, help="Logging level (default from RDLAB_LOG_LEVEL)")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for module in (identities, training, evaluation):
        module.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    logging.getLogger("rdlab").setLevel(args.log_level.upper())
    args.command_line = " ".join(["rdlab", *(shlex.quote(a) for a in argv)])

    try:
        return args.handler(args)
    except KeyboardInterrupt:
        logger.error("Interrupted; completed runs are kept and in-flight runs are marked aborted")
        return EXIT_FAILURE
    except LabError as e:
        print(json.dumps(error_payload(e)), file=sys.stderr)
        return handle_exception(e, f"Error running {args.command}")
    except Exception as e:
        return handle_exception(e, f"Error running {args.command}")


if __name__ == "__main__":
    sys.exit(main())
