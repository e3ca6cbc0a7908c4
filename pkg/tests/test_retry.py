"""
Unit tests for the retry helpers (engine spawning and model redraws)
"""

import pytest
import sys
from pathlib import Path
from unittest.mock import Mock, patch

sys.path.insert(0, str(Path(__file__).parent.parent))

from utils.retry import retry_with_backoff, RetryContext


class TestRetryWithBackoff:
    """Test suite for retry_with_backoff decorator."""

    def test_successful_first_attempt(self):
        """A call that succeeds is made once."""
        spawn = Mock(return_value=0)

        @retry_with_backoff(max_retries=3)
        def start_engine():
            return spawn()

        assert start_engine() == 0
        assert spawn.call_count == 1

    def test_retries_transient_spawn_failure(self):
        """BlockingIOError (EAGAIN on fork) is retried until it clears."""
        calls = 0

        @retry_with_backoff(max_retries=3, base_delay=0, exceptions=(BlockingIOError,))
        def start_engine():
            nonlocal calls
            calls += 1
            if calls < 3:
                raise BlockingIOError("Resource temporarily unavailable")
            return "started"

        assert start_engine() == "started"
        assert calls == 3

    def test_max_retries_exceeded(self):
        """The last exception propagates once the budget is spent."""
        calls = 0

        @retry_with_backoff(max_retries=2, base_delay=0, exceptions=(BlockingIOError,))
        def always_busy():
            nonlocal calls
            calls += 1
            raise BlockingIOError("busy")

        with pytest.raises(BlockingIOError, match="busy"):
            always_busy()
        assert calls == 3

    def test_missing_binary_not_retried(self):
        """Errors outside the retry set propagate on the first attempt."""
        calls = 0

        @retry_with_backoff(max_retries=3, base_delay=0, exceptions=(BlockingIOError,))
        def start_missing():
            nonlocal calls
            calls += 1
            raise FileNotFoundError("no such engine")

        with pytest.raises(FileNotFoundError):
            start_missing()
        assert calls == 1

    def test_on_retry_callback(self):
        """on_retry sees every failed attempt but the last."""
        callback = Mock()
        calls = 0

        @retry_with_backoff(max_retries=2, base_delay=0, on_retry=callback)
        def flaky():
            nonlocal calls
            calls += 1
            if calls < 3:
                raise BlockingIOError("again")
            return calls

        assert flaky() == 3
        assert callback.call_count == 2
        assert callback.call_args_list[0].args[0] == 0

    def test_delay_is_capped(self):
        """Backoff delays grow exponentially up to max_delay."""
        @retry_with_backoff(max_retries=3, base_delay=1.0, max_delay=2.5, exceptions=(BlockingIOError,))
        def always_busy():
            raise BlockingIOError("busy")

        with patch('utils.retry.time.sleep') as sleep:
            with pytest.raises(BlockingIOError):
                always_busy()
        assert [c.args[0] for c in sleep.call_args_list] == [1.0, 2.0, 2.5]


class TestRetryContext:
    """Test suite for the generation retry loop."""

    def test_successful_first_attempt(self):
        """A first-try success leaves the budget untouched."""
        with RetryContext(max_retries=3, base_delay=0, label="round 0") as retry:
            attempts = 0
            while retry.should_continue():
                attempts += 1
                break

        assert attempts == 1
        assert not retry.exhausted

    def test_redraw_until_success(self):
        """Failed draws are recorded and the loop continues."""
        attempts = 0

        with RetryContext(max_retries=5, base_delay=0, label="round 1") as retry:
            while retry.should_continue():
                attempts += 1
                try:
                    if attempts < 3:
                        raise ValueError("adapter synthesis failed")
                    break
                except ValueError as e:
                    retry.handle_exception(e)

        assert attempts == 3
        assert isinstance(retry.last_exception, ValueError)

    def test_zero_delay_never_sleeps(self):
        """Generation retries use base_delay=0 and do not sleep."""
        with patch('utils.retry.time.sleep') as sleep:
            with RetryContext(max_retries=3, base_delay=0) as retry:
                for _ in range(3):
                    retry.handle_exception(ValueError("redraw"))
        sleep.assert_not_called()

    def test_max_retries_exceeded_raises(self):
        """The final failure is re-raised and the context is exhausted."""
        retry = RetryContext(max_retries=2, base_delay=0)
        with pytest.raises(ValueError, match="always fails"):
            with retry:
                while retry.should_continue():
                    try:
                        raise ValueError("always fails")
                    except ValueError as e:
                        retry.handle_exception(e)
        assert retry.exhausted
        assert retry.attempt == 3
