"""Shared fixtures: tiny model configurations and window helpers.

All random inputs are seeded so every assertion in the suite is
deterministic; "frozen" values in the tests were computed once by an
independent route (hand arithmetic, exhaustive enumeration, or a
straight-line script) and pinned.
"""

import numpy as np
import pytest

from fedcast import ForecastConfig


@pytest.fixture
def tiny_config() -> ForecastConfig:
    """Smallest config exercising every block type and the batched path."""
    return ForecastConfig(
        lookback=32,
        horizon=2,
        patch_len=8,
        stride=4,
        embed_dim=8,
        heads=2,
        head_dim=4,
        blocks=("id", "time_mlp", "attention"),
    )


@pytest.fixture
def grad_config() -> ForecastConfig:
    """Config used by the exhaustive gradient checks."""
    return ForecastConfig(
        lookback=32,
        horizon=2,
        patch_len=8,
        stride=4,
        embed_dim=8,
        heads=2,
        head_dim=4,
    )


def rel_err(fd: float, an: float, floor: float = 1e-4) -> float:
    """Relative disagreement with a floor guarding near-zero gradients,
    where central differences are dominated by floating-point roundoff."""
    return abs(fd - an) / max(abs(fd), abs(an), floor)


def make_client_windows(rng: np.random.Generator, n: int, lookback: int, horizon: int):
    """Random (inputs, targets) arrays shaped like real window sets."""
    x = rng.normal(0.0, 1.0, size=(n, lookback))
    y = rng.normal(0.0, 1.0, size=(n, horizon))
    return x, y
