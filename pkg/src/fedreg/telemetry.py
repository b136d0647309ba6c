"""Opt-in error tracking and tracing for simulation runs.

Wraps the Sentry SDK (compatible with Sentry and GlitchTip backends). It is
off unless a DSN is configured, and honours ``DO_NOT_TRACK`` and
``FEDREG_TELEMETRY_ENABLED=false``. Events never carry tensors: every extra
value is bounded to a short string before it leaves the process.

Structured run events (:class:`RunEvent`) are always written to the module
logger and, when telemetry is initialized, attached as breadcrumbs.
"""

from __future__ import annotations

import logging
import os
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, Optional

import sentry_sdk
from sentry_sdk.types import Event, Hint

logger = logging.getLogger(__name__)

MAX_EXTRA_CHARS = 256


def _parse_bool(value: str) -> bool:
    return value.strip().lower() in ("true", "1", "yes", "on")


def telemetry_opted_out() -> bool:
    """True when the environment disables telemetry."""
    if os.getenv("DO_NOT_TRACK", "").lower() in ("1", "true"):
        return True
    explicit = os.getenv("FEDREG_TELEMETRY_ENABLED", "")
    return bool(explicit) and not _parse_bool(explicit)


def _bound_value(value: Any) -> Any:
    if value is None or isinstance(value, (bool, int, float)):
        return value
    return str(value)[:MAX_EXTRA_CHARS]


def bounded_before_send(event: Event, hint: Hint) -> Optional[Event]:
    """Truncate extras so arrays and corpora never leave the process."""
    _ = hint
    extra = event.get("extra")
    if isinstance(extra, dict):
        event["extra"] = {str(k): _bound_value(v) for k, v in extra.items()}
    return event


class TelemetryClient:
    """Process-wide telemetry client; use :func:`get_telemetry`."""

    _instance: Optional["TelemetryClient"] = None

    def __init__(self) -> None:
        self._initialized = False
        self._enabled = not telemetry_opted_out()

    @classmethod
    def get_instance(cls) -> "TelemetryClient":
        if cls._instance is None:
            cls._instance = cls()
        return cls._instance

    @classmethod
    def reset_instance(cls) -> None:
        """Reset the singleton (useful for testing)."""
        cls._instance = None

    @property
    def enabled(self) -> bool:
        return self._enabled

    @property
    def initialized(self) -> bool:
        return self._initialized

    @property
    def active(self) -> bool:
        return self._enabled and self._initialized

    def initialize(
        self,
        dsn: Optional[str] = None,
        package_version: str = "unknown",
        environment: Optional[str] = None,
        **kwargs: Any,
    ) -> bool:
        """Initialize the Sentry SDK once.

        Args:
            dsn: Sentry/GlitchTip DSN; falls back to ``FEDREG_TELEMETRY_DSN``.
            package_version: Reported as a tag.
            environment: Environment name; falls back to
                ``FEDREG_TELEMETRY_ENVIRONMENT`` or ``"research"``.
            **kwargs: Passed through to ``sentry_sdk.init``.

        Returns:
            True if telemetry is now active.
        """
        if self._initialized:
            return True
        self._enabled = not telemetry_opted_out()
        dsn = dsn or os.getenv("FEDREG_TELEMETRY_DSN")
        if not self._enabled or not dsn:
            return False

        sentry_sdk.init(
            dsn=dsn,
            environment=environment or os.getenv("FEDREG_TELEMETRY_ENVIRONMENT", "research"),
            traces_sample_rate=kwargs.pop("traces_sample_rate", 1.0),
            send_default_pii=False,
            before_send=bounded_before_send,
            **kwargs,
        )
        sentry_sdk.set_tag("package", "fedreg")
        sentry_sdk.set_tag("package_version", package_version)
        sentry_sdk.set_tag("python_version", platform.python_version())
        sentry_sdk.set_tag("os", platform.system())
        self._initialized = True
        return True

    def capture_exception(self, exception: Optional[BaseException] = None) -> Optional[str]:
        if not self.active:
            return None
        return sentry_sdk.capture_exception(exception)

    def set_tag(self, key: str, value: Any) -> None:
        if not self.active:
            return
        sentry_sdk.set_tag(key, _bound_value(value))

    def set_context(self, name: str, context: Dict[str, Any]) -> None:
        if not self.active:
            return
        sentry_sdk.set_context(name, {k: _bound_value(v) for k, v in context.items()})

    def add_breadcrumb(self, message: str, category: str = "default", **data: Any) -> None:
        if not self.active:
            return
        sentry_sdk.add_breadcrumb(
            message=message,
            category=category,
            level="info",
            data={k: _bound_value(v) for k, v in data.items()},
        )

    def flush(self, timeout: float = 2.0) -> None:
        if not self.active:
            return
        sentry_sdk.flush(timeout=timeout)


def get_telemetry() -> TelemetryClient:
    return TelemetryClient.get_instance()


class EventCategory(str, Enum):
    """Categories of run events."""

    EXPERIMENT = "experiment"
    ROUND = "round"
    SWEEP = "sweep"
    CHECK = "check"
    COMMAND = "command"


@dataclass
class RunEvent:
    """A structured, loggable record of something the engine did."""

    name: str
    category: EventCategory
    properties: Dict[str, Any] = field(default_factory=dict)
    timestamp: datetime = field(default_factory=lambda: datetime.now(timezone.utc))

    def send(self) -> None:
        props = " ".join(f"{k}={v}" for k, v in self.properties.items())
        logger.info("%s:%s %s", self.category.value, self.name, props)
        get_telemetry().add_breadcrumb(
            f"{self.category.value}:{self.name}",
            category=self.category.value,
            timestamp=self.timestamp.isoformat(),
            **self.properties,
        )


def track_round(round_index: int, **properties: Any) -> None:
    RunEvent("round_completed", EventCategory.ROUND, {"round": round_index, **properties}).send()


def track_experiment(name: str, **properties: Any) -> None:
    RunEvent(name, EventCategory.EXPERIMENT, properties).send()


def track_command(command: str, success: bool = True, **properties: Any) -> None:
    RunEvent(
        f"command:{command}",
        EventCategory.COMMAND,
        {"command": command, "success": success, **properties},
    ).send()
