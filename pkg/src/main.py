"""
Spatial Forcing Lab - Main Application Entry Point
"""
import logging
import sys
from typing import Optional, Sequence

import structlog

from src.config import settings


def configure_logging(level: str = settings.log_level, fmt: str = settings.log_format) -> None:
    """Configure structlog on top of stdlib logging, writing to stderr."""
    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=getattr(logging, level.upper(), logging.INFO),
        force=True,
    )
    renderer = structlog.processors.JSONRenderer() if fmt == "json" else structlog.dev.ConsoleRenderer()
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            renderer,
        ],
        wrapper_class=structlog.stdlib.BoundLogger,
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the ``sf`` command."""
    configure_logging()
    from src.cli.app import run_cli

    try:
        return run_cli(argv)
    except KeyboardInterrupt:
        structlog.get_logger(__name__).info("Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
