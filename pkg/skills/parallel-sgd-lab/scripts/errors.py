#!/usr/bin/env python3
"""
Exception types and exit codes shared by the parallel-SGD lab scripts.

Validation failures subclass ValueError so callers that only know about
ValueError keep working. Divergence is never an exception: the simulator
reports it as a run status.
"""

from typing import Optional


# ─── Exit codes ──────────────────────────────────────────────────

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_DIVERGED = 2
EXIT_CONFIG_ERROR = 64


# ─── Exceptions ──────────────────────────────────────────────────


class PsynError(Exception):
    """Base class for every error raised by the lab."""


class RejectedInputError(PsynError, ValueError):
    """An argument violates a precondition (shape, range, emptiness)."""


class NumericError(PsynError, ArithmeticError):
    """A computation produced NaN/Inf.

    `layer` is the 1-based affine layer index when the failure happened
    inside a model forward pass, otherwise None.
    """

    def __init__(self, message: str, layer: Optional[int] = None):
        super().__init__(message)
        self.layer = layer


class ConfigError(PsynError, ValueError):
    """A configuration value is missing, unknown, or inconsistent."""

    def __init__(self, message: str, key: Optional[str] = None):
        if key and key not in message:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


class ProtocolError(PsynError):
    """A message reached the parameter server in a shape it cannot apply."""


class InfeasibleError(PsynError, ValueError):
    """A speedup cannot be explained by the analytic model (superlinear)."""


class UnderdeterminedError(PsynError, ValueError):
    """A speedup fit has fewer observations than free parameters."""
