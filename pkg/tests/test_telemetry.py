"""Tests for the telemetry client and run events."""

import logging
import os
from unittest.mock import patch

from fedreg.telemetry import (
    MAX_EXTRA_CHARS,
    EventCategory,
    RunEvent,
    TelemetryClient,
    bounded_before_send,
    get_telemetry,
    telemetry_opted_out,
    track_command,
    track_round,
)


class TestOptOut:
    """Tests for environment opt-out."""

    def test_default_not_opted_out(self, clean_env):
        """Telemetry is not opted out by default."""
        assert telemetry_opted_out() is False

    def test_do_not_track(self, clean_env):
        """DO_NOT_TRACK=1 opts out."""
        with patch.dict(os.environ, {"DO_NOT_TRACK": "1"}):
            assert telemetry_opted_out() is True

    def test_explicit_disable(self, clean_env):
        """FEDREG_TELEMETRY_ENABLED=false opts out."""
        with patch.dict(os.environ, {"FEDREG_TELEMETRY_ENABLED": "false"}):
            assert telemetry_opted_out() is True

    def test_explicit_enable(self, clean_env):
        """FEDREG_TELEMETRY_ENABLED=true keeps telemetry on."""
        with patch.dict(os.environ, {"FEDREG_TELEMETRY_ENABLED": "true"}):
            assert telemetry_opted_out() is False


class TestTelemetryClient:
    """Tests for the TelemetryClient singleton."""

    def test_singleton(self):
        """get_telemetry returns one shared instance."""
        assert get_telemetry() is get_telemetry()
        assert TelemetryClient.get_instance() is get_telemetry()

    def test_reset_instance(self):
        """Resetting creates a fresh instance."""
        first = TelemetryClient.get_instance()
        TelemetryClient.reset_instance()
        assert TelemetryClient.get_instance() is not first

    def test_no_dsn_stays_inactive(self, clean_env, mock_sentry):
        """Without a DSN nothing is initialized."""
        client = TelemetryClient.get_instance()
        assert client.initialize() is False
        assert not client.active
        mock_sentry.init.assert_not_called()

    def test_opted_out_stays_inactive(self, clean_env, mock_sentry):
        """DO_NOT_TRACK wins over a configured DSN."""
        with patch.dict(os.environ, {"DO_NOT_TRACK": "1"}):
            client = TelemetryClient.get_instance()
            assert client.initialize(dsn="https://test@example.com/1") is False
        mock_sentry.init.assert_not_called()

    def test_initialize_with_dsn(self, enabled_telemetry, mock_sentry):
        """A DSN initializes the SDK with bounded events and no PII."""
        assert enabled_telemetry.active
        kwargs = mock_sentry.init.call_args.kwargs
        assert kwargs["send_default_pii"] is False
        assert kwargs["before_send"] is bounded_before_send
        assert kwargs["environment"] == "research"
        mock_sentry.set_tag.assert_any_call("package", "fedreg")

    def test_dsn_from_environment(self, clean_env, mock_sentry):
        """FEDREG_TELEMETRY_DSN is used when no DSN is passed."""
        with patch.dict(os.environ, {"FEDREG_TELEMETRY_DSN": "https://env@example.com/2"}):
            assert TelemetryClient.get_instance().initialize() is True
        assert mock_sentry.init.call_args.kwargs["dsn"] == "https://env@example.com/2"

    def test_initialize_once(self, enabled_telemetry, mock_sentry):
        """A second initialize is a no-op."""
        enabled_telemetry.initialize(dsn="https://other@example.com/3")
        assert mock_sentry.init.call_count == 1

    def test_inactive_methods_are_noops(self, clean_env, mock_sentry):
        """Inactive clients never touch the SDK."""
        client = TelemetryClient.get_instance()
        assert client.capture_exception(ValueError("x")) is None
        client.set_tag("k", "v")
        client.add_breadcrumb("m")
        client.flush()
        mock_sentry.capture_exception.assert_not_called()
        mock_sentry.add_breadcrumb.assert_not_called()
        mock_sentry.flush.assert_not_called()

    def test_capture_exception_when_active(self, enabled_telemetry, mock_sentry):
        """Active clients forward exceptions."""
        mock_sentry.capture_exception.return_value = "event-id"
        assert enabled_telemetry.capture_exception(ValueError("x")) == "event-id"


class TestBoundedBeforeSend:
    """Tests for extra-value bounding."""

    def test_long_values_truncated(self):
        """Long strings and arrays are cut to a short string."""
        event = {"extra": {"blob": "x" * 5000, "n": 3, "flag": True, "none": None}}
        out = bounded_before_send(event, {})
        assert len(out["extra"]["blob"]) == MAX_EXTRA_CHARS
        assert out["extra"]["n"] == 3
        assert out["extra"]["flag"] is True
        assert out["extra"]["none"] is None

    def test_containers_become_strings(self):
        """Lists are stringified."""
        out = bounded_before_send({"extra": {"v": [1, 2, 3]}}, {})
        assert out["extra"]["v"] == "[1, 2, 3]"

    def test_event_without_extra(self):
        """Events without extras pass through."""
        event = {"message": "hi"}
        assert bounded_before_send(event, {}) == {"message": "hi"}


class TestRunEvent:
    """Tests for structured run events."""

    def test_logged(self, caplog):
        """Events are always written to the logger."""
        with caplog.at_level(logging.INFO, logger="fedreg.telemetry"):
            track_round(3, clients=4)
        assert "round:round_completed" in caplog.text
        assert "round=3" in caplog.text
        assert "clients=4" in caplog.text

    def test_breadcrumb_when_active(self, enabled_telemetry, mock_sentry):
        """Active telemetry records events as breadcrumbs."""
        RunEvent("cell_done", EventCategory.SWEEP, {"freq": "1bt"}).send()
        kwargs = mock_sentry.add_breadcrumb.call_args.kwargs
        assert kwargs["message"] == "sweep:cell_done"
        assert kwargs["category"] == "sweep"
        assert kwargs["data"]["freq"] == "1bt"

    def test_track_command(self, caplog):
        """Command events carry the command and outcome."""
        with caplog.at_level(logging.INFO, logger="fedreg.telemetry"):
            track_command("check", success=False)
        assert "command:command:check" in caplog.text
        assert "success=False" in caplog.text
