"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps these onto stable exit codes, so library code raises the most
specific class that applies instead of a bare ``ValueError``.
"""


class LabelHallucError(Exception):
    """Base class for all package errors."""


class ConfigError(LabelHallucError, ValueError):
    """Invalid configuration value or combination of values."""


class DimensionError(LabelHallucError, ValueError):
    """Array shapes that do not line up."""


class DataError(LabelHallucError, ValueError):
    """Malformed or insufficient data (parse errors, too few examples)."""


class NumericError(LabelHallucError, FloatingPointError):
    """NaN or Inf produced where finite values are required."""


class TrainingError(NumericError):
    """Optimization diverged; carries the step index where it happened."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ContractViolation(LabelHallucError, RuntimeError):
    """A pipeline precondition or invariant was broken by the caller."""
