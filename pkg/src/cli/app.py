"""
Spatial Forcing Lab - CLI Application

Argument parser setup and dispatch.
"""
import argparse
from typing import Optional, Sequence

import structlog

from src.cli.commands import register_commands
from src.cli.middleware import apply_middleware


logger = structlog.get_logger(__name__)


def create_cli_app() -> argparse.ArgumentParser:
    """
    Create the ``sf`` argument parser with every command registered.

    Returns:
        Configured ArgumentParser
    """
    parser = argparse.ArgumentParser(
        prog="sf",
        description="Spatial Forcing lab: datasets, training, evaluation, ablations and probes.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    register_commands(subparsers)
    return parser


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and run the selected command; returns the exit code."""
    parser = create_cli_app()
    args = parser.parse_args(argv)
    handler = apply_middleware(args.handler)
    return handler(args)
