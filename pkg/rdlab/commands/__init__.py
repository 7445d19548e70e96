# Command-line adapters; each module exposes register(subparsers)
import argparse
import json
import os
import sys
from typing import Any, Optional, Sequence

from rdlab.utils.common import canonical_json, ensure_directory_exists, get_logger

logger = get_logger("cli")


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 1:
        raise argparse.ArgumentTypeError(f"{value} must be >= 1")
    return value


def float_list(text: str):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated list of numbers")


def announce(config: Any, seeds: Sequence[int]) -> None:
    """Print the resolved configuration and seeds before any work"""
    print(f"# resolved config: {canonical_json(config)}", file=sys.stderr)
    print(f"# seeds: {','.join(str(s) for s in seeds)}", file=sys.stderr)


def emit_json(document: Any, out: Optional[str] = None) -> None:
    text = json.dumps(document, indent=2, sort_keys=True)
    if out:
        ensure_directory_exists(os.path.dirname(os.path.abspath(out)))
        with open(out, "w") as handle:
            handle.write(text + "\n")
        logger.info(f"Wrote {out}")
    else:
        print(text)
