"""
Spatial Forcing Lab - CLI Middleware

Command logging and the error boundary that turns exceptions into a single
machine-parseable stderr line.
"""
import argparse
import functools
import sys
import time
from typing import Callable

import structlog


logger = structlog.get_logger(__name__)


Handler = Callable[[argparse.Namespace], int]


def format_error_line(error: BaseException) -> str:
    """``error kind=<Class> message="<text>"`` on one line."""
    message = " ".join(str(error).split()).replace("\\", "\\\\").replace('"', '\\"')
    return f'error kind={type(error).__name__} message="{message}"'


def log_command_middleware(handler: Handler) -> Handler:
    """Log command start and completion with its arguments and duration."""

    @functools.wraps(handler)
    def wrapper(args: argparse.Namespace) -> int:
        arguments = {k: v for k, v in vars(args).items() if k not in ("handler", "command")}
        logger.info("Command started", command=args.command, **arguments)
        started = time.perf_counter()
        code = handler(args)
        logger.info(
            "Command finished",
            command=args.command,
            exit_code=code,
            seconds=round(time.perf_counter() - started, 3),
        )
        return code

    return wrapper


def error_boundary_middleware(handler: Handler) -> Handler:
    """Catch every exception, log it, print the error line and exit with 1."""

    @functools.wraps(handler)
    def wrapper(args: argparse.Namespace) -> int:
        try:
            return handler(args)
        except KeyboardInterrupt:
            raise
        except Exception as e:
            logger.exception(
                "Command failed",
                command=getattr(args, "command", None),
                error=str(e),
                error_type=type(e).__name__,
            )
            print(format_error_line(e), file=sys.stderr)
            return 1

    return wrapper


def apply_middleware(handler: Handler) -> Handler:
    """Wrap a command handler with logging inside the error boundary."""
    return error_boundary_middleware(log_command_middleware(handler))
