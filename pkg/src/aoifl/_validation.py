"""Small argument checks shared by the public entry points."""

from __future__ import annotations

import numbers


def check_int(value, name: str, *, min_value: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    value = int(value)
    if min_value is not None and value < min_value:
        raise ValueError(f"{name} must be >= {min_value}, got {value}")
    return value


def check_real(value, name: str, *, low=None, high=None,
               low_open: bool = False, high_open: bool = False):
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    if value != value:
        raise ValueError(f"{name} is NaN")
    if low is not None:
        if value < low or (low_open and value == low):
            op = ">" if low_open else ">="
            raise ValueError(f"{name} must be {op} {low}, got {value}")
    if high is not None:
        if value > high or (high_open and value == high):
            op = "<" if high_open else "<="
            raise ValueError(f"{name} must be {op} {high}, got {value}")
    return value


def check_probability(value, name: str):
    return check_real(value, name, low=0, high=1)
