"""Exception types raised across the simulator.

Every error the engine raises deliberately derives from :class:`FedRegError`
so the CLI can turn it into a diagnostic and a nonzero exit code.
"""

from __future__ import annotations


class FedRegError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(FedRegError, ValueError):
    """Invalid configuration, shape mismatch or otherwise unusable setup."""


class DataError(FedRegError, ValueError):
    """Input data cannot be used (empty input, all samples infeasible, ...)."""


class InfeasibleSampleError(DataError):
    """A label sequence cannot be aligned to the available frames under CTC."""

    def __init__(self, n_frames: int, n_labels: int, required: int) -> None:
        self.n_frames = n_frames
        self.n_labels = n_labels
        self.required = required
        self.loss = float("inf")
        super().__init__(
            f"CTC-infeasible sample: {n_labels} labels need at least {required} frames, "
            f"got {n_frames}"
        )


class ProtocolError(FedRegError, RuntimeError):
    """Federation protocol violated (weights, missing reports, round lag)."""


class ContractViolation(FedRegError, AssertionError):
    """A caller broke a documented precondition of an internal API."""
