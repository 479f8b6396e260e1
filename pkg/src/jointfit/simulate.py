"""Synthetic data from the joint model with a constant baseline hazard."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from .errors import InvalidInputError
from .model import LongitudinalRecord, ModelParams, SubjectData, TimeBasis, _PolynomialRows

BRACKET_END = 1e6


def default_true_params() -> ModelParams:
    return ModelParams(
        alpha=[0.5],
        beta=[1.0, 0.5],
        gamma=[-0.5],
        sigma=0.5,
        D=[[1.0, 0.1], [0.1, 0.25]],
    )


@dataclass(frozen=True)
class SimDesign:
    n_subjects: int = 300
    true_params: ModelParams = field(default_factory=default_true_params)
    baseline_rate: float = 0.2
    censoring_rate: float = 0.1
    measurement_schedule: tuple = (0.0, 0.5, 1.0, 1.5, 2.0)
    basis: TimeBasis = field(default_factory=lambda: TimeBasis.from_name("intercept+slope"))
    w_distribution: str = "bernoulli(0.5)"
    seed: int = 0
    measurement_noise: bool = True
    random_effects: bool = True

    def __post_init__(self):
        if int(self.n_subjects) < 1:
            raise InvalidInputError("n_subjects must be at least 1")
        if not (self.baseline_rate > 0 and self.censoring_rate > 0):
            raise InvalidInputError("baseline and censoring rates must be positive")
        sched = tuple(float(t) for t in self.measurement_schedule)
        if not sched or any(t < 0 for t in sched) or any(b <= a for a, b in zip(sched, sched[1:])):
            raise InvalidInputError("measurement schedule must be nonempty, nonnegative and increasing")
        object.__setattr__(self, "measurement_schedule", sched)
        p = self.true_params
        if p.beta.size != self.basis.p_fixed or p.r != self.basis.r:
            raise InvalidInputError("true parameters do not match the basis dimensions")
        if p.gamma.size != 1:
            raise InvalidInputError("simulation draws a single baseline covariate")
        _parse_w(self.w_distribution)


def _parse_w(spec: str):
    s = spec.replace(" ", "").lower()
    m = re.fullmatch(r"bernoulli\(([-+0-9.eE]+)\)", s)
    if m:
        prob = float(m.group(1))
        if not 0 <= prob <= 1:
            raise InvalidInputError("Bernoulli probability must lie in [0, 1]")
        return lambda rng: float(rng.random() < prob)
    m = re.fullmatch(r"normal\(([-+0-9.eE]+),([-+0-9.eE]+)\)", s)
    if m:
        mu, sd = float(m.group(1)), float(m.group(2))
        if sd < 0:
            raise InvalidInputError("normal sd must be nonnegative")
        return lambda rng: float(mu + sd * rng.standard_normal())
    raise InvalidInputError(f"unsupported w distribution {spec!r}")


@dataclass(frozen=True)
class SubjectDraw:
    """Latent quantities behind one simulated subject."""

    b: np.ndarray
    w: float
    u: float
    latent_time: float
    censor_time: float
    bracket_hit: bool

    @property
    def observed_event(self) -> bool:
        return self.latent_time <= self.censor_time


@dataclass(frozen=True)
class SimulationReport:
    n_events: int
    n_censored: int
    n_bracket_hits: int


def _linear_trajectory(basis: TimeBasis) -> bool:
    return all(
        isinstance(fn, _PolynomialRows) and fn.degree <= 1 for fn in (basis.fixed_basis, basis.random_basis)
    )


def _trajectory_line(design: SimDesign, b):
    """(intercept, slope) of m(t) for bases linear in t."""
    p = design.true_params
    m0 = design.basis.fixed(0.0)[0] @ p.beta + design.basis.random(0.0)[0] @ b
    m1 = design.basis.fixed(1.0)[0] @ p.beta + design.basis.random(1.0)[0] @ b
    return m0, m1 - m0


def cumulative_hazard(design: SimDesign, b, w: float, t: float) -> float:
    """H(t) = lambda_0 int_0^t exp(gamma w + alpha m(s)) ds for one subject."""
    p = design.true_params
    alpha = p.alpha[0]
    scale = design.baseline_rate * math.exp(p.gamma[0] * w)
    if _linear_trajectory(design.basis):
        a, c = _trajectory_line(design, b)
        k = scale * math.exp(alpha * a)
        ac = alpha * c
        return k * t if ac == 0 else k * math.expm1(ac * t) / ac
    basis = design.basis

    def rate(s):
        m = basis.fixed(s)[0] @ p.beta + basis.random(s)[0] @ b
        return scale * math.exp(alpha * m)

    val, _ = integrate.quad(rate, 0.0, t, epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


def _latent_time(design: SimDesign, b, w: float, target: float):
    """Solve H(T) = target; returns (T, bracket_hit)."""
    p = design.true_params
    alpha = p.alpha[0]
    if _linear_trajectory(design.basis):
        a, c = _trajectory_line(design, b)
        k = design.baseline_rate * math.exp(p.gamma[0] * w + alpha * a)
        ac = alpha * c
        if ac == 0:
            return target / k, False
        arg = ac * target / k
        if arg <= -1.0:
            return math.inf, False
        return math.log1p(arg) / ac, False

    def f(t):
        try:
            return cumulative_hazard(design, b, w, t) - target
        except OverflowError:
            return 1.0  # H is past any finite target

    lo, hi = 0.0, 1.0
    while f(hi) < 0:
        if hi >= BRACKET_END:
            return BRACKET_END, True
        lo, hi = hi, min(2.0 * hi, BRACKET_END)
    return optimize.brentq(f, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=500), False


def simulate_draws(design: SimDesign):
    """Simulate a dataset and return it with the per-subject latent draws and a summary."""
    p = design.true_params
    n = int(design.n_subjects)
    draw_w = _parse_w(design.w_distribution)
    chol = np.linalg.cholesky(p.D)
    sched = np.array(design.measurement_schedule)
    X_s = design.basis.fixed(sched)
    Z_s = design.basis.random(sched)
    streams = np.random.SeedSequence(design.seed).spawn(n)

    data, draws = [], []
    hits = 0
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        z = rng.standard_normal(p.r)
        b = chol @ z if design.random_effects else np.zeros(p.r)
        w = draw_w(rng)
        u = float(rng.random())
        while u == 0.0:
            u = float(rng.random())
        censor = float(rng.exponential(1.0 / design.censoring_rate))
        noise = rng.standard_normal(sched.size)
        latent, hit = _latent_time(design, b, w, -math.log(u))
        if hit:
            hits += 1
            T, event = min(censor, BRACKET_END), False
        else:
            event = latent <= censor
            T = latent if event else censor
        keep = sched <= T
        if not np.any(keep):
            raise InvalidInputError(f"subject {i + 1}: no scheduled measurement at or before T={T}")
        y = X_s[keep] @ p.beta + Z_s[keep] @ b
        if design.measurement_noise:
            y = y + p.sigma * noise[keep]
        records = tuple(LongitudinalRecord(float(t), float(v)) for t, v in zip(sched[keep], y))
        data.append(SubjectData(str(i + 1), T, event, (w,), records, design.basis))
        draws.append(SubjectDraw(b, w, u, latent, censor, hit))
    n_events = sum(s.event_indicator for s in data)
    report = SimulationReport(n_events, n - n_events, hits)
    return data, draws, report


def simulate_dataset(design: SimDesign) -> list[SubjectData]:
    return simulate_draws(design)[0]


def inverse_hazard_check(design: SimDesign, draw: SubjectDraw) -> float:
    """|H(T*) + log u| for an observed event; 0 for censored draws."""
    if not draw.observed_event or draw.bracket_hit:
        return 0.0
    return abs(cumulative_hazard(design, draw.b, draw.w, draw.latent_time) + math.log(draw.u))
