"""
Decorators shared by the command layer and long-running helpers.
"""

import functools
import time
from typing import Any, Callable, Optional

from .logging_config import get_logger

logger = get_logger("decorators")


def log_execution(func: Optional[Callable] = None, *, stage: Optional[str] = None) -> Callable:
    """
    Log start, duration and failure of a call.

    Usable bare (``@log_execution``) or with a stage label
    (``@log_execution(stage="train")``). Successful calls log at DEBUG, failures
    at ERROR before the exception propagates.

    Example:
        @log_execution(stage="sweep")
        def run_grid(config):
            ...
    """
    def decorator(fn: Callable) -> Callable:
        label = stage or fn.__name__

        @functools.wraps(fn)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            start = time.perf_counter()
            logger.debug(f"Starting {label}")
            try:
                result = fn(*args, **kwargs)
            except Exception as e:
                logger.error(f"Failed {label} after {time.perf_counter() - start:.3f}s: {e}")
                raise
            logger.debug(f"Completed {label} in {time.perf_counter() - start:.3f}s")
            return result

        return wrapper

    if func is not None:
        return decorator(func)
    return decorator
