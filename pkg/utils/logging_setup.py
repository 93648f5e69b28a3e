"""
Structured logging configuration.

structlog renders key/value events through the standard ``logging`` module;
the console handler is rich's ``RichHandler``.
"""

import logging
from typing import Optional

import structlog
from rich.console import Console
from rich.logging import RichHandler

console = Console(stderr=True)

_configured = False


def setup_logging(level: str = "INFO", quiet: bool = False, log_file: Optional[str] = None) -> None:
    """Configure structlog and the root logger.

    Args:
        level: Log level name used unless ``quiet`` is set.
        quiet: Restrict console output to warnings and errors.
        log_file: Optional file that receives plain-text records as well.
    """
    global _configured

    log_level = logging.WARNING if quiet else getattr(logging, level.upper(), logging.INFO)

    handlers = [RichHandler(console=console, rich_tracebacks=True, show_path=False)]
    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
        handlers.append(file_handler)

    logging.basicConfig(level=log_level, format="%(message)s", datefmt="[%X]", handlers=handlers, force=True)

    if not _configured:
        structlog.configure(
            processors=[
                structlog.stdlib.filter_by_level,
                structlog.stdlib.add_logger_name,
                structlog.processors.StackInfoRenderer(),
                structlog.processors.format_exc_info,
                structlog.dev.ConsoleRenderer(colors=False),
            ],
            logger_factory=structlog.stdlib.LoggerFactory(),
            wrapper_class=structlog.stdlib.BoundLogger,
            cache_logger_on_first_use=True,
        )
        _configured = True
