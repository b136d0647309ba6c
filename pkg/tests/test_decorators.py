"""Tests for telemetry decorators."""

from unittest.mock import MagicMock, patch

import pytest

from fedreg.decorators import TelemetrySpan, track_errors, track_performance


def _active_client():
    client = MagicMock()
    client.active = True
    return client


class TestTrackErrors:
    """Tests for track_errors decorator."""

    def test_reraises_by_default(self):
        """Exceptions should be re-raised by default."""

        @track_errors()
        def failing_function():
            raise ValueError("test error")

        with pytest.raises(ValueError, match="test error"):
            failing_function()

    def test_no_reraise_option(self):
        """Exceptions should not be re-raised when reraise=False."""

        @track_errors(reraise=False)
        def failing_function():
            raise ValueError("test error")

        assert failing_function() is None

    def test_successful_function(self):
        """Successful functions should work normally."""

        @track_errors()
        def successful_function(x, y):
            return x + y

        assert successful_function(2, 3) == 5

    @patch("fedreg.decorators.sentry_sdk")
    @patch("fedreg.decorators.get_telemetry")
    def test_captures_exception_when_active(self, mock_get_telemetry, mock_sdk):
        """Exceptions should be captured and tagged with the function name."""
        mock_client = _active_client()
        mock_get_telemetry.return_value = mock_client

        @track_errors()
        def failing_function():
            raise ValueError("test error")

        with pytest.raises(ValueError):
            failing_function()

        mock_client.capture_exception.assert_called_once()
        mock_sdk.get_current_scope.return_value.set_tag.assert_any_call(
            "function", "failing_function"
        )


class TestTrackPerformance:
    """Tests for track_performance decorator."""

    def test_returns_function_result(self):
        """Decorated function should return its result."""

        @track_performance()
        def compute(x, y):
            return x * y

        assert compute(3, 4) == 12

    def test_preserves_exceptions(self):
        """Exceptions should propagate through the decorator."""

        @track_performance()
        def failing_function():
            raise RuntimeError("oops")

        with pytest.raises(RuntimeError, match="oops"):
            failing_function()

    def test_no_transaction_when_inactive(self, clean_env):
        """Without telemetry no transaction is started."""
        with patch("fedreg.decorators.sentry_sdk") as mock_sdk:

            @track_performance("experiment.run")
            def work():
                return "done"

            assert work() == "done"
            mock_sdk.start_transaction.assert_not_called()

    @patch("fedreg.decorators.sentry_sdk")
    @patch("fedreg.decorators.get_telemetry")
    def test_transaction_when_active(self, mock_get_telemetry, mock_sdk):
        """The transaction uses the given name and is marked ok."""
        mock_get_telemetry.return_value = _active_client()

        @track_performance("experiment.run")
        def work():
            return 1

        assert work() == 1
        mock_sdk.start_transaction.assert_called_once_with(op="simulation", name="experiment.run")
        transaction = mock_sdk.start_transaction.return_value.__enter__.return_value
        transaction.set_status.assert_called_with("ok")


class TestTelemetrySpan:
    """Tests for TelemetrySpan context manager."""

    def test_basic_usage(self):
        """Basic span usage should work and record elapsed time."""
        with TelemetrySpan("federation.round", "round 1") as span:
            result = 1 + 1

        assert result == 2
        assert span.elapsed >= 0.0

    def test_exception_handling(self):
        """Exceptions should propagate through span."""
        with pytest.raises(ValueError, match="test"):
            with TelemetrySpan("op", "name"):
                raise ValueError("test")

    def test_set_data_inactive(self):
        """set_data should not raise when span is not active."""
        with TelemetrySpan("op", "name") as span:
            span.set_data("clients", 3)

    @patch("fedreg.decorators.sentry_sdk")
    @patch("fedreg.decorators.get_telemetry")
    def test_active_span_status(self, mock_get_telemetry, mock_sdk):
        """Failures mark the span as an internal error."""
        mock_get_telemetry.return_value = _active_client()
        inner = mock_sdk.start_span.return_value

        with pytest.raises(KeyError):
            with TelemetrySpan("sweep.cell", "cell") as span:
                span.set_data("freq", "1bt")
                raise KeyError("x")

        inner.set_data.assert_called_once_with("freq", "1bt")
        inner.set_status.assert_called_once_with("internal_error")
