"""Decorators and a context manager for tracing simulation work.

- track_performance: run a function inside a Sentry transaction
- track_errors: report exceptions before re-raising
- TelemetrySpan: time a block (a round, a sweep cell) as a span
"""

from __future__ import annotations

import functools
import time
from typing import Any, Callable, Optional, TypeVar

import sentry_sdk

from .telemetry import get_telemetry

F = TypeVar("F", bound=Callable[..., Any])


def track_performance(name: Optional[str] = None, op: str = "simulation") -> Callable[[F], F]:
    """Wrap a function in a transaction that records its duration.

    Example:
        @track_performance("experiment.run")
        def run_experiment(...):
            ...
    """

    def decorator(func: F) -> F:
        operation_name = name or func.__name__

        @functools.wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            if not get_telemetry().active:
                return func(*args, **kwargs)

            with sentry_sdk.start_transaction(op=op, name=operation_name) as transaction:
                start = time.perf_counter()
                try:
                    result = func(*args, **kwargs)
                    transaction.set_status("ok")
                    return result
                except Exception:
                    transaction.set_status("internal_error")
                    raise
                finally:
                    duration = time.perf_counter() - start
                    sentry_sdk.set_measurement("duration_ms", duration * 1000, "millisecond")

        return wrapper  # type: ignore

    return decorator


def track_errors(reraise: bool = True) -> Callable[[F], F]:
    """Capture exceptions to telemetry, tagging the failing function."""

    def decorator(func: F) -> F:
        @functools.wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            try:
                return func(*args, **kwargs)
            except Exception as e:
                telemetry = get_telemetry()
                if telemetry.active:
                    scope = sentry_sdk.get_current_scope()
                    scope.set_tag("function", func.__name__)
                    scope.set_tag("module", func.__module__)
                    telemetry.capture_exception(e)
                if reraise:
                    raise
                return None

        return wrapper  # type: ignore

    return decorator


class TelemetrySpan:
    """Time a block of work; reported as a span when telemetry is active.

    The measured duration is always available as ``elapsed`` afterwards.

    Example:
        with TelemetrySpan("federation.round", f"round {r}") as span:
            span.set_data("clients", 16)
            ...
    """

    def __init__(self, op: str, name: str) -> None:
        self.op = op
        self.name = name
        self.elapsed: float = 0.0
        self._span: Optional[Any] = None
        self._start: float = 0.0

    def __enter__(self) -> "TelemetrySpan":
        self._start = time.perf_counter()
        if get_telemetry().active:
            self._span = sentry_sdk.start_span(op=self.op, name=self.name)
            self._span.__enter__()
        return self

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        self.elapsed = time.perf_counter() - self._start
        if self._span is not None:
            self._span.set_status("internal_error" if exc_type is not None else "ok")
            self._span.set_measurement("duration_ms", self.elapsed * 1000, "millisecond")
            self._span.__exit__(exc_type, exc_val, exc_tb)

    def set_data(self, key: str, value: Any) -> None:
        if self._span is not None:
            self._span.set_data(key, value)
