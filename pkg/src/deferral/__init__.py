"""Calibration, selective abstention and tool-routed recovery for code-model prediction logs."""

__version__ = "0.1.0"

from deferral.errors import DeferralError, InvariantError

__all__ = ["DeferralError", "InvariantError", "__version__"]
