"""Step-function cumulative baseline hazard and its profiled (Breslow-type) update."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateRiskSetError, InvalidInputError


@dataclass(frozen=True, eq=False)
class StepHazard:
    """Right-continuous step cumulative hazard with jumps ``increments`` at ``jump_times``."""

    jump_times: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.jump_times, dtype=float).reshape(-1).copy()
        d = np.asarray(self.increments, dtype=float).reshape(-1).copy()
        if t.shape != d.shape:
            raise InvalidInputError("jump_times and increments must have the same length")
        if np.any(~np.isfinite(t)) or np.any(t <= 0):
            raise InvalidInputError("jump times must be positive and finite")
        if np.any(np.diff(t) <= 0):
            raise InvalidInputError("jump times must be strictly increasing")
        if np.any(~np.isfinite(d)) or np.any(d < 0):
            raise InvalidInputError("increments must be finite and nonnegative")
        t.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "jump_times", t)
        object.__setattr__(self, "increments", d)

    @classmethod
    def empty(cls) -> "StepHazard":
        return cls(np.empty(0), np.empty(0))

    def __len__(self):
        return self.jump_times.size

    def cum_at(self, t):
        """Lambda(t) = sum of increments with jump time <= t (vectorized in ``t``)."""
        cums = np.concatenate([[0.0], np.cumsum(self.increments)])
        idx = np.searchsorted(self.jump_times, t, side="right")
        out = cums[idx]
        return float(out) if np.ndim(out) == 0 else out

    def integral_against(self, f: Callable, upper: float):
        """int_0^upper f dLambda as the finite sum over jumps <= upper."""
        k = np.searchsorted(self.jump_times, upper, side="right")
        total = 0.0
        for t, d in zip(self.jump_times[:k], self.increments[:k]):
            total = total + np.asarray(f(t), dtype=float) * d
        return total

    def to_dict(self) -> dict:
        return {"jump_times": self.jump_times.tolist(), "increments": self.increments.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "StepHazard":
        return cls(np.asarray(obj["jump_times"], dtype=float), np.asarray(obj["increments"], dtype=float))


def cum_at(hazard: StepHazard, t):
    if np.any(np.asarray(t) < 0):
        raise InvalidInputError("time must be nonnegative")
    return hazard.cum_at(t)


def integral_against(hazard: StepHazard, f: Callable, upper: float):
    return hazard.integral_against(f, upper)


def breslow_increments(event_counts: np.ndarray, risk_weight: np.ndarray) -> np.ndarray:
    """d_k / sum_{l at risk} E_b[exp(gamma' w_l + alpha m_l(t_k))].

    ``risk_weight`` holds the per-time denominators.  An event time whose
    risk set carries no weight is degenerate: the event subject is always at
    risk of itself, so this signals corrupted inputs.
    """
    event_counts = np.asarray(event_counts, dtype=float)
    risk_weight = np.asarray(risk_weight, dtype=float)
    bad = (event_counts > 0) & ~(risk_weight > 0)
    if np.any(bad):
        raise DegenerateRiskSetError(f"empty risk set at {int(bad.sum())} event time(s)")
    out = np.zeros_like(event_counts)
    np.divide(event_counts, risk_weight, out=out, where=event_counts > 0)
    return out


def breslow_update(data: Sequence, params, posteriors) -> StepHazard:
    """Profiled NPMLE of the cumulative baseline hazard given posterior summaries.

    Tied event times share a single jump whose numerator is the tie count; the
    at-risk indicator is ``T_l >= t_k``.
    """
    from .cohort import Cohort
    from .quadrature import PosteriorBatch

    cohort = Cohort(data)
    batch = posteriors if isinstance(posteriors, PosteriorBatch) else PosteriorBatch.from_summaries(posteriors)
    if len(batch) != cohort.n:
        raise InvalidInputError("posteriors must align with data")
    moments = cohort.risk_moments(batch, params, order=0)
    inc = breslow_increments(cohort.event_counts, moments.S0.sum(axis=0))
    return StepHazard(cohort.grid, inc)
