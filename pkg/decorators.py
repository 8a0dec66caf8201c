import logging
import sys
import time
from functools import wraps
from typing import Callable

import click

from exceptions import ShiftCPError, StageError

logger = logging.getLogger(__name__)


def stage(name: str) -> Callable:
    """Decorator tagging any failure inside the wrapped call with a stage name"""
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except StageError:
                raise
            except Exception as e:
                logger.error(f"Stage {name} failed: {e}")
                raise StageError(name, str(e)) from e
        return wrapper
    return decorator


def timed(func: Callable) -> Callable:
    """Decorator logging the wall-clock duration of a call at DEBUG"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        try:
            return func(*args, **kwargs)
        finally:
            logger.debug(f"{func.__name__} took {time.perf_counter() - start:.3f}s")
    return wrapper


def cli_errors(func: Callable) -> Callable:
    """Decorator turning library errors into a stderr message and exit code 1"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ShiftCPError as e:
            message = str(e) if isinstance(e, StageError) else f"error: {e}"
            click.echo(message, err=True)
            sys.exit(1)
    return wrapper
