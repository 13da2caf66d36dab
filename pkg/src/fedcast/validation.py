"""Input validation helpers shared by the estimator layer and the CLI."""
from __future__ import annotations

import numpy as np


def check_windows(x, y, name: str = "X") -> tuple[np.ndarray, np.ndarray]:
    """Validate a supervised window pair: X [n, lookback], y [n, horizon]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D [n, lookback], got shape {x.shape}")
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or len(y) != len(x):
        raise ValueError(f"y must be [n, horizon] aligned with {name}, got {y.shape}")
    if len(x) == 0:
        raise ValueError(f"{name} must contain at least one window")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError(f"{name}/y must be finite")
    return x, y


def check_matrix(x, name: str = "X") -> np.ndarray:
    """Validate a 2-D float matrix (series or windows)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")
    return x


def check_ratio(value: float, name: str, minimum_open: bool = True) -> float:
    """Validate a ratio in (0, 1] (or [0, 1] when minimum_open=False)."""
    value = float(value)
    low_ok = value > 0.0 if minimum_open else value >= 0.0
    if not (low_ok and value <= 1.0):
        bracket = "(0, 1]" if minimum_open else "[0, 1]"
        raise ValueError(f"{name} must be in {bracket}, got {value}")
    return value


def check_positive_int(value: int, name: str) -> int:
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
