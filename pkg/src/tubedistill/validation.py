"""Input validation helpers used by the estimator classes and free functions."""

from __future__ import annotations

from typing import Any, Sized

from .errors import ConfigurationError, ContractError


def check_ratio(name: str, value: float) -> float:
    """Mask ratios live in [0, 1): 1.0 would leave no defined visible set."""
    value = float(value)
    if not 0.0 <= value < 1.0:
        raise ConfigurationError(f"{name} must be in [0, 1), got {value}")
    return value


def check_positive(name: str, value: int) -> int:
    value = int(value)
    if value < 1:
        raise ConfigurationError(f"{name} must be a positive integer, got {value}")
    return value


def check_nonnegative(name: str, value: float) -> float:
    value = float(value)
    if value < 0:
        raise ConfigurationError(f"{name} must be >= 0, got {value}")
    return value


def check_choice(name: str, value: Any, allowed: tuple) -> Any:
    if value not in allowed:
        raise ConfigurationError(f"{name} must be one of {allowed}, got {value!r}")
    return value


def require(condition: bool, message: str) -> None:
    """Raise ContractError when an API precondition does not hold."""
    if not condition:
        raise ContractError(message)


def check_nonempty(name: str, value: Sized) -> None:
    require(len(value) > 0, f"{name} must not be empty")
