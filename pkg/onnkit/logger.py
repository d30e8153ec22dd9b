"""Logging configuration for onnkit"""
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional, Union

from dotenv import load_dotenv

load_dotenv()

PACKAGE_LOGGER = "onnkit"
DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def _env_level() -> int:
    return getattr(logging, os.getenv("LOG_LEVEL", "INFO").upper(), logging.INFO)


def setup_logger(
    name: str = PACKAGE_LOGGER,
    level: Optional[int] = None,
    format_string: Optional[str] = None
) -> logging.Logger:
    """
    Set up and configure logger

    The package logger owns the stdout handler. Module loggers ("onnkit.<module>")
    get no handler of their own and propagate to it, so LOG_LEVEL applies everywhere.

    Args:
        name: Logger name
        level: Logging level (default: INFO, or from LOG_LEVEL env var)
        format_string: Custom format string

    Returns:
        Configured logger instance
    """
    if name != PACKAGE_LOGGER and name.startswith(PACKAGE_LOGGER + "."):
        setup_logger(PACKAGE_LOGGER, format_string=format_string)
        child = logging.getLogger(name)
        if level is not None:
            child.setLevel(level)
        return child

    logger = logging.getLogger(name)

    # Avoid adding handlers multiple times
    if logger.handlers:
        return logger

    level = _env_level() if level is None else level
    logger.setLevel(level)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(level)
    console_handler.setFormatter(logging.Formatter(format_string or DEFAULT_FORMAT, DATE_FORMAT))
    logger.addHandler(console_handler)

    # Prevent propagation to parent loggers to avoid duplicate logs
    logger.propagate = False

    if level != logging.DEBUG:
        logging.getLogger("PIL").setLevel(logging.WARNING)

    return logger


@contextmanager
def run_log(path: Union[str, Path], level: Optional[int] = None) -> Iterator[Path]:
    """
    Mirror package logs into a file for the duration of one command

    The file carries timestamps, so it is a volatile artifact like the timing report.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    package = setup_logger(PACKAGE_LOGGER)
    handler = logging.FileHandler(target, mode="w", encoding="utf-8")
    handler.setLevel(_env_level() if level is None else level)
    handler.setFormatter(logging.Formatter(DEFAULT_FORMAT, DATE_FORMAT))
    package.addHandler(handler)
    try:
        yield target
    finally:
        package.removeHandler(handler)
        handler.close()


# Default logger instance
logger = setup_logger()
