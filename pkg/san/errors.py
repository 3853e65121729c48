"""
Error Types and Input Validation
Exception hierarchy shared by the numerical core, data layer and harness,
plus the array checks every public entry point runs before computing.
"""

import logging
from typing import Any, Optional

import numpy as np

logger = logging.getLogger(__name__)


class SANError(ValueError):
    """Base class for all domain errors"""
    pass


class InvalidArgumentError(SANError):
    """Argument outside the operation's domain"""
    pass


class DegenerateInputError(SANError):
    """Input for which the quantity is undefined (e.g. zero-norm vector)"""
    pass


class InvariantViolationError(SANError):
    """Internal invariant broken; indicates a bug rather than bad input"""
    pass


class SingularLogError(SANError):
    """Logarithm evaluated at a singular point"""
    pass


class UndefinedScoreError(SANError):
    """Score requested for a split that lacks known or unknown samples"""

    def __init__(self, message: str, missing: Optional[str] = None):
        super().__init__(message)
        self.missing = missing


class EmptyDatasetError(UndefinedScoreError):
    """Dataset (or one of its domains) holds no samples"""
    pass


class UndefinedSNRError(SANError):
    """Signal-to-noise ratio with zero (or no) noise-pair loss"""
    pass


class TrainingDivergenceError(SANError):
    """Non-finite loss or gradient during training"""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        super().__init__(message)
        self.layer_index = layer_index


class FeatureFileParseError(SANError):
    """Malformed row in a feature or predictions file"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ConfigurationError(SANError):
    """Invalid configuration file, key or value"""
    pass


class CheckpointFormatError(SANError):
    """Checkpoint bytes do not follow the parameter file layout"""
    pass


# ============================================
# VALIDATION HELPERS
# ============================================

def ensure_finite(value: Any, name: str = "input") -> np.ndarray:
    """
    Convert to a float64 array and reject NaN/inf entries

    Args:
        value: Scalar or array-like
        name: Name used in the error message

    Returns:
        The value as a float64 numpy array
    """
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def ensure_matrix(value: Any, name: str = "X") -> np.ndarray:
    """Finite 2-D float64 array with at least one row"""
    try:
        arr = np.asarray(value, dtype=np.float64)
    except ValueError as e:
        # ragged rows
        raise InvalidArgumentError(f"{name} rows have unequal dimensions: {e}")
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InvalidArgumentError(f"{name} must be a non-empty matrix, got shape {arr.shape}")
    return ensure_finite(arr, name)


def ensure_probability(value: float, name: str, upper_open: bool = True) -> float:
    """Check a rate lies in [0, 1) (or [0, 1] when upper_open is False)"""
    value = float(value)
    upper_ok = value < 1.0 if upper_open else value <= 1.0
    if not (0.0 <= value and upper_ok) or not np.isfinite(value):
        bound = "[0, 1)" if upper_open else "[0, 1]"
        raise InvalidArgumentError(f"{name} must lie in {bound}, got {value}")
    return value
