"""
Logging configuration for ilmar-lab.

Every module logs through ``get_logger("<module>")``, a child of the
``ilmar_lab`` logger that ``setup_logging`` configures once per process.
"""

import logging
import sys
from pathlib import Path
from typing import Optional, Union

from .exceptions import ConfigurationError

ROOT_LOGGER = "ilmar_lab"
DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def resolve_level(level: Union[str, int]) -> int:
    """Numeric level for a level name (case-insensitive) or number."""
    if isinstance(level, int):
        return level
    name = str(level).strip().upper()
    if name not in LEVELS:
        raise ConfigurationError(f"Unknown log level {level!r}; expected one of {', '.join(LEVELS)}",
                                 field="log_level")
    return getattr(logging, name)


def setup_logging(
    level: Union[str, int] = "INFO",
    format_string: Optional[str] = None,
    log_file: Optional[Union[str, Path]] = None
) -> logging.Logger:
    """
    Configure the ``ilmar_lab`` logger.

    Args:
        level: Log level name (DEBUG, INFO, WARNING, ERROR, CRITICAL) or number
        format_string: Custom format string
        log_file: Optional file that receives the same records, e.g. ``runs/train.log``

    Returns:
        Configured logger

    Raises:
        ConfigurationError: Unknown level name
    """
    numeric = resolve_level(level)
    formatter = logging.Formatter(format_string or DEFAULT_FORMAT)

    logger = logging.getLogger(ROOT_LOGGER)
    logger.setLevel(numeric)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    # stdout carries command results only
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(numeric)
    console.setFormatter(formatter)
    logger.addHandler(console)

    if log_file:
        path = Path(log_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(path, encoding="utf-8")
        file_handler.setLevel(numeric)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """Logger ``ilmar_lab.<name>``, or the package root logger without a name."""
    return logging.getLogger(f"{ROOT_LOGGER}.{name}" if name else ROOT_LOGGER)
