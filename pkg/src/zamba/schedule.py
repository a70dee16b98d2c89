"""Learning-rate schedules for the two training phases.

Phase 1: linear warmup from 0, then cosine decay from ``eta_max`` to
``eta_min``. Annealing: linear rewarmup from 0 to ``eta0``, then
``eta(s) = A * exp(-s / (gamma * T)) + B`` with ``A, B`` fixed by
``eta(0) = eta0`` and ``eta(T) = etaT``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

__all__ = [
    "Phase1Schedule",
    "AnnealSchedule",
    "ConstantSchedule",
    "LinearDecaySchedule",
    "solve_anneal_coeffs",
    "lr_at",
]


def solve_anneal_coeffs(eta0: float, etaT: float, gamma: float) -> tuple[float, float]:
    """Coefficients ``(A, B)`` of ``A * exp(-s / (gamma T)) + B`` hitting both endpoints."""
    if not eta0 > etaT > 0:
        raise ValueError(f"need eta0 > etaT > 0, got eta0={eta0}, etaT={etaT}")
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    A = (eta0 - etaT) / -math.expm1(-1.0 / gamma)
    return A, eta0 - A


def _check_t(t: float, total: int) -> None:
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside schedule range [0, {total}]")


@dataclass(frozen=True)
class Phase1Schedule:
    total_steps: int
    eta_max: float = 1.5e-4
    eta_min: float = 7.5e-5
    warmup_fraction: float = 0.01

    def __post_init__(self):
        if self.total_steps < 2:
            raise ValueError("total_steps must be >= 2")
        if not self.eta_min < self.eta_max:
            raise ValueError("eta_min must be below eta_max")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")

    @property
    def warmup_steps(self) -> int:
        return min(max(1, round(self.warmup_fraction * self.total_steps)), self.total_steps - 1)

    def __call__(self, t: float) -> float:
        _check_t(t, self.total_steps)
        W = self.warmup_steps
        if t < W:
            return self.eta_max * t / W
        tau = (t - W) / (self.total_steps - W)
        return self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1 + math.cos(math.pi * tau))

    def max_step_change(self) -> float:
        """Upper bound on ``|eta(t+1) - eta(t)|`` from the slope of each region."""
        W = self.warmup_steps
        cos_slope = 0.5 * (self.eta_max - self.eta_min) * math.pi / (self.total_steps - W)
        return max(self.eta_max / W, cos_slope)


@dataclass(frozen=True)
class AnnealSchedule:
    """Rewarmup over ``rewarmup_steps`` then exponential decay.

    ``total_steps`` counts the whole phase; the decay runs over the
    remaining ``total_steps - rewarmup_steps`` iterations.
    """

    total_steps: int
    eta0: float = 1.1e-4
    etaT: float = 1e-7
    gamma: float = 0.25
    rewarmup_steps: int | None = None
    A: float = field(init=False)
    B: float = field(init=False)

    def __post_init__(self):
        if self.rewarmup_steps is None:
            object.__setattr__(self, "rewarmup_steps", max(1, round(0.01 * self.total_steps)))
        if not 0 < self.rewarmup_steps < self.total_steps:
            raise ValueError("rewarmup_steps must lie in (0, total_steps)")
        A, B = solve_anneal_coeffs(self.eta0, self.etaT, self.gamma)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def decay_steps(self) -> int:
        return self.total_steps - self.rewarmup_steps

    def decay(self, s: float) -> float:
        """Exponential part, ``s`` counted from the end of rewarmup."""
        _check_t(s, self.decay_steps)
        return self.A * math.exp(-s / (self.gamma * self.decay_steps)) + self.B

    def __call__(self, t: float) -> float:
        _check_t(t, self.total_steps)
        R = self.rewarmup_steps
        if t < R:
            return self.eta0 * t / R
        return self.decay(t - R)

    def max_step_change(self) -> float:
        return max(self.eta0 / self.rewarmup_steps, self.A / (self.gamma * self.decay_steps))


@dataclass(frozen=True)
class LinearDecaySchedule:
    """Linear decay between the same endpoints, for comparison with the exponential form."""

    total_steps: int
    eta0: float = 1.1e-4
    etaT: float = 1e-7

    def __call__(self, t: float) -> float:
        _check_t(t, self.total_steps)
        return self.eta0 + (self.etaT - self.eta0) * t / self.total_steps


@dataclass(frozen=True)
class ConstantSchedule:
    total_steps: int
    eta: float

    def __call__(self, t: float) -> float:
        _check_t(t, self.total_steps)
        return self.eta


def lr_at(schedule, t: float) -> float:
    return schedule(t)
