"""Small input-validation helpers shared across the package."""

import numpy as np


class ConfigError(ValueError):
    """A configuration value is out of its documented range."""


class NumericalDivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries diagnostics in the message."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


def check_probability(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_positive(name: str, value: float) -> float:
    value = float(value)
    if not value > 0.0 or not np.isfinite(value):
        raise ConfigError(f"{name} must be a finite positive number, got {value}")
    return value


def check_dim(name: str, value: int, minimum: int = 2) -> int:
    value = int(value)
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")
    return value


def check_finite(name: str, arr) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_length(name: str, seq, expected: int):
    if len(seq) != expected:
        raise ValueError(f"{name} must have length {expected}, got {len(seq)}")
    return seq
