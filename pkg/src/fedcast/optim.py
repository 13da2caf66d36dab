"""Adam on flat parameter vectors, plus learning-rate schedules.

Model parameters are optimized as one flat float64 vector (the same
canonical layout the federation policies exchange), so the optimizer
state is just two moment vectors and a step counter.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, ShapeError


@dataclass
class AdamState:
    """First/second moment estimates and step count for one vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    @classmethod
    def zeros(cls, n: int, **kwargs) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), **kwargs)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float | None = None,
) -> np.ndarray:
    """One bias-corrected Adam update; returns the new vector.

    `state` is advanced in place; `params` itself is not modified.
    """
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError(
            f"adam_step: params {params.shape}, grads {grads.shape}, "
            f"state {state.m.shape} must agree"
        )
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError("adam_step received non-finite gradients")
    rate = state.lr if lr is None else float(lr)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    out = params - rate * m_hat / (np.sqrt(v_hat) + state.eps)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("adam_step produced non-finite parameters")
    return out


@dataclass(frozen=True)
class LrSchedule:
    """Per-step learning rate.

    `constant` always emits `base_rate`.  `one_cycle` warms up linearly
    from `base_rate` to `peak_rate` over the first 30% of `total_steps`,
    then decays linearly back to `base_rate`, so the emitted rate is
    positive for every step.
    """

    kind: str = "constant"
    base_rate: float = 1e-3
    peak_rate: float = 1e-2
    total_steps: int = field(default=0)

    WARMUP_FRACTION = 0.3

    def __post_init__(self):
        if self.kind not in ("constant", "one_cycle"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base_rate <= 0:
            raise ValueError("base_rate must be positive")
        if self.kind == "one_cycle":
            if self.total_steps < 1:
                raise ValueError("one_cycle needs total_steps >= 1")
            if self.peak_rate < self.base_rate:
                raise ValueError("peak_rate must be >= base_rate")

    def rate(self, step: int) -> float:
        if self.kind == "constant":
            return self.base_rate
        step = min(max(step, 0), self.total_steps - 1)
        warm = int(self.WARMUP_FRACTION * self.total_steps)
        if step < warm:
            return self.base_rate + (self.peak_rate - self.base_rate) * step / warm
        tail = self.total_steps - warm
        if tail <= 1:
            return self.peak_rate
        frac = (step - warm) / (tail - 1)
        return self.peak_rate - (self.peak_rate - self.base_rate) * frac
