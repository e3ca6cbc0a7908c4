"""
Retry Mechanism Utilities
Backoff decorator for flaky OS operations (engine process spawning) and a
bounded retry context for model generation.
"""

import functools
import time
from typing import Callable, Optional, Tuple, Type

from utils.logger import setup_logger

logger = setup_logger(__name__)


def retry_with_backoff(
    max_retries: int = 3,
    base_delay: float = 1.0,
    max_delay: float = 60.0,
    exponential_base: float = 2.0,
    exceptions: Tuple[Type[Exception], ...] = (Exception,),
    on_retry: Optional[Callable] = None
):
    """
    Decorator that retries a function with exponential backoff.

    Args:
        max_retries: Maximum number of retry attempts
        base_delay: Initial delay between retries in seconds
        max_delay: Maximum delay between retries
        exponential_base: Base for exponential backoff calculation
        exceptions: Tuple of exceptions to catch and retry
        on_retry: Optional callback called as ``on_retry(attempt, exc)``

    Usage:
        @retry_with_backoff(max_retries=3, exceptions=(BlockingIOError,))
        def spawn_engine(argv):
            ...
    """
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            for attempt in range(max_retries + 1):
                try:
                    return func(*args, **kwargs)
                except exceptions as e:
                    if attempt == max_retries:
                        logger.error("All %d attempts failed for %s: %s",
                                     max_retries + 1, func.__name__, e)
                        raise

                    delay = min(base_delay * (exponential_base ** attempt), max_delay)
                    logger.warning("Attempt %d/%d failed for %s: %s. Retrying in %.1fs...",
                                   attempt + 1, max_retries + 1, func.__name__, e, delay)

                    if on_retry:
                        on_retry(attempt, e)

                    if delay > 0:
                        time.sleep(delay)

        return wrapper
    return decorator


class RetryContext:
    """
    Context manager for retry loops with manual control.

    Generation retries use ``base_delay=0``: a failed model is simply redrawn
    from the same round stream, there is nothing to wait for.

    Usage:
        with RetryContext(max_retries=10, base_delay=0, label="round 7") as retry:
            while retry.should_continue():
                try:
                    model = build()
                    break
                except AdapterSynthesisError as e:
                    retry.handle_exception(e)
    """

    def __init__(
        self,
        max_retries: int = 3,
        base_delay: float = 1.0,
        max_delay: float = 60.0,
        label: str = "operation"
    ):
        self.max_retries = max_retries
        self.base_delay = base_delay
        self.max_delay = max_delay
        self.label = label
        self.attempt = 0
        self.last_exception = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        return False

    @property
    def exhausted(self) -> bool:
        return self.attempt > self.max_retries

    def should_continue(self) -> bool:
        """Check if we should continue trying."""
        return self.attempt <= self.max_retries

    def handle_exception(self, exception: Exception):
        """Record a failed attempt; re-raise once the budget is spent."""
        self.last_exception = exception
        self.attempt += 1

        if self.exhausted:
            logger.error("%s: all %d attempts failed: %s", self.label, self.max_retries + 1, exception)
            raise exception

        delay = min(self.base_delay * (2 ** (self.attempt - 1)), self.max_delay)
        logger.warning("%s: attempt %d/%d failed: %s", self.label, self.attempt,
                       self.max_retries + 1, exception)
        if delay > 0:
            time.sleep(delay)
