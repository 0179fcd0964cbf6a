"""
Custom exceptions for ilmar-lab.

This module defines all exceptions used throughout the package
for better error handling and debugging.
"""

from typing import Any, Dict, Optional, Sequence


class IlmarError(Exception):
    """Base exception for all ilmar-lab errors."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


class StructureError(IlmarError):
    """Raised when two parameter vectors or tensors do not line up."""
    pass


class NumericalError(IlmarError):
    """Raised when an operation produces a NaN or infinite value."""

    def __init__(self, message: str, node_index: Optional[int] = None, op: Optional[str] = None):
        super().__init__(message, {"node_index": node_index, "op": op})
        self.node_index = node_index
        self.op = op


class EnvironmentStepError(IlmarError):
    """Raised on an invalid action or when stepping a finished episode."""
    pass


class ConvergenceError(IlmarError):
    """Raised when iterative policy evaluation hits its iteration cap."""

    def __init__(self, message: str, iterations: int = 0, residual: float = float("inf")):
        super().__init__(message, {"iterations": iterations, "residual": residual})
        self.iterations = iterations
        self.residual = residual


class CalibrationError(IlmarError):
    """Raised when tier policies cannot be calibrated to the requested fractions."""

    def __init__(self, message: str, requested: Sequence[float] = (), achieved: Sequence[float] = ()):
        super().__init__(message, {"requested": list(requested), "achieved": list(achieved)})
        self.requested = list(requested)
        self.achieved = list(achieved)


class DatasetFormatError(IlmarError):
    """Raised when a dataset or checkpoint file cannot be parsed."""

    def __init__(self, message: str, line_number: Optional[int] = None, path: Optional[str] = None):
        super().__init__(message, {"line_number": line_number, "path": path})
        self.line_number = line_number
        self.path = path


class ConfigurationError(IlmarError):
    """Raised when there's a configuration error."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message, {"field": field})
        self.field = field


class TrainingAborted(IlmarError):
    """Raised when training hits a non-finite loss and stops at the last good checkpoint."""

    def __init__(self, message: str, iteration: int, checkpoint_path: Optional[str] = None,
                 cause: Optional[Exception] = None):
        super().__init__(message, {"iteration": iteration, "checkpoint_path": checkpoint_path})
        self.iteration = iteration
        self.checkpoint_path = checkpoint_path
        self.cause = cause


class UsageError(IlmarError):
    """Raised when the command line is used incorrectly."""
    pass


class AnalysisError(IlmarError):
    """Raised when a statistic is undefined for its inputs (constant ranks, all-zero weights)."""
    pass
