"""Domain types and exact log-density evaluation for the joint model.

The longitudinal marker follows a linear mixed model

    y_i(t) = m_i(t) + eps,    m_i(t) = x(t)' beta + z(t)' b_i,

with ``eps ~ N(0, sigma^2)`` and ``b_i ~ N(0, D)``.  The event time has
hazard ``lambda_0(t) exp(gamma' w_i + alpha m_i(t))`` where the baseline
cumulative hazard is a step function (see :mod:`jointfit.hazard`).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InconsistentHazardError, InvalidInputError, NumericalDomainError

LOG_2PI = math.log(2.0 * math.pi)


class _PolynomialRows:
    """Callable ``t -> [1, t, ..., t^degree]`` (picklable, unlike a lambda)."""

    def __init__(self, degree: int):
        self.degree = degree

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return t[:, None] ** np.arange(self.degree + 1)


@dataclass(frozen=True, eq=False)
class TimeBasis:
    """Design rows x(t) (fixed effects) and z(t) (random effects).

    ``fixed_basis`` and ``random_basis`` map a 1-d array of times to arrays of
    shape ``(len(t), p_fixed)`` and ``(len(t), r)``.
    """

    name: str
    p_fixed: int
    r: int
    fixed_basis: Callable[[np.ndarray], np.ndarray]
    random_basis: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def polynomial(cls, fixed_degree: int, random_degree: int, name: str | None = None) -> "TimeBasis":
        if fixed_degree < 0 or random_degree < 0:
            raise InvalidInputError("polynomial degrees must be nonnegative")
        if name is None:
            name = f"poly({fixed_degree},{random_degree})"
        return cls(
            name=name,
            p_fixed=fixed_degree + 1,
            r=random_degree + 1,
            fixed_basis=_PolynomialRows(fixed_degree),
            random_basis=_PolynomialRows(random_degree),
        )

    @classmethod
    def from_name(cls, name: str) -> "TimeBasis":
        """Resolve a serialized basis name.

        ``"intercept"``: fixed (1, t), random intercept.  ``"intercept+slope"``
        (alias ``"slope"``): fixed and random (1, t).  ``"poly(a,b)"``:
        polynomial of degree ``a`` in the fixed part and ``b`` in the random part.
        """
        key = name.strip().lower()
        if key == "intercept":
            return cls.polynomial(1, 0, name="intercept")
        if key in ("intercept+slope", "slope"):
            return cls.polynomial(1, 1, name="intercept+slope")
        match = re.fullmatch(r"poly\((\d+),(\d+)\)", key.replace(" ", ""))
        if match:
            return cls.polynomial(int(match.group(1)), int(match.group(2)))
        raise InvalidInputError(f"unknown basis {name!r}")

    def fixed(self, t) -> np.ndarray:
        return self._rows(self.fixed_basis, t, self.p_fixed, "fixed")

    def random(self, t) -> np.ndarray:
        return self._rows(self.random_basis, t, self.r, "random")

    @staticmethod
    def _rows(fn, t, width, label):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.asarray(fn(t), dtype=float)
        if out.shape != (t.shape[0], width):
            raise InvalidInputError(
                f"{label} basis returned shape {out.shape}, expected {(t.shape[0], width)}"
            )
        return out

    @property
    def fixed_names(self) -> list[str]:
        return [_power_name(k) for k in range(self.p_fixed)]

    def __eq__(self, other):
        if not isinstance(other, TimeBasis):
            return NotImplemented
        return (self.name, self.p_fixed, self.r) == (other.name, other.p_fixed, other.r)

    def __hash__(self):
        return hash((self.name, self.p_fixed, self.r))


def _power_name(k: int) -> str:
    return {0: "1", 1: "t"}.get(k, f"t^{k}")


@dataclass(frozen=True)
class LongitudinalRecord:
    time: float
    response: float


@dataclass(frozen=True)
class SubjectData:
    """One subject: survival record ``(T, delta, w)`` plus longitudinal measurements."""

    id: object
    event_time: float
    event_indicator: bool
    baseline_covariates: tuple
    records: tuple
    basis: TimeBasis = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "event_time", float(self.event_time))
        object.__setattr__(self, "event_indicator", bool(self.event_indicator))
        w = tuple(float(v) for v in np.atleast_1d(self.baseline_covariates))
        object.__setattr__(self, "baseline_covariates", w)
        recs = tuple(
            r if isinstance(r, LongitudinalRecord) else LongitudinalRecord(float(r[0]), float(r[1]))
            for r in self.records
        )
        object.__setattr__(self, "records", recs)

        if not (math.isfinite(self.event_time) and self.event_time > 0):
            raise InvalidInputError(f"subject {self.id!r}: event time must be positive and finite")
        if not all(math.isfinite(v) for v in w):
            raise InvalidInputError(f"subject {self.id!r}: baseline covariates must be finite")
        if not recs:
            raise InvalidInputError(f"subject {self.id!r}: at least one longitudinal record is required")
        times = [r.time for r in recs]
        if any(not math.isfinite(t) or t < 0 for t in times):
            raise InvalidInputError(f"subject {self.id!r}: measurement times must be finite and >= 0")
        if any(not math.isfinite(r.response) for r in recs):
            raise InvalidInputError(f"subject {self.id!r}: responses must be finite")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidInputError(f"subject {self.id!r}: measurement times must be strictly increasing")
        if times[-1] > self.event_time:
            raise InvalidInputError(
                f"subject {self.id!r}: measurement at t={times[-1]} after event/censoring time {self.event_time}"
            )

    @property
    def n_obs(self) -> int:
        return len(self.records)

    @cached_property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.records])

    @cached_property
    def responses(self) -> np.ndarray:
        return np.array([r.response for r in self.records])

    @cached_property
    def w(self) -> np.ndarray:
        return np.array(self.baseline_covariates)

    @cached_property
    def X(self) -> np.ndarray:
        return self.basis.fixed(self.times)

    @cached_property
    def Z(self) -> np.ndarray:
        return self.basis.random(self.times)


def vech_indices(r: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of the lower triangle, stacked column by column."""
    rows, cols = [], []
    for j in range(r):
        for i in range(j, r):
            rows.append(i)
            cols.append(j)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


def vech(matrix: np.ndarray) -> np.ndarray:
    rows, cols = vech_indices(matrix.shape[-1])
    return matrix[..., rows, cols]


def unvech(vec: np.ndarray, r: int) -> np.ndarray:
    rows, cols = vech_indices(r)
    out = np.zeros((r, r))
    out[rows, cols] = vec
    out[cols, rows] = vec
    return out


@dataclass(frozen=True, eq=False)
class ModelParams:
    """theta = (alpha, beta, gamma, sigma, D)."""

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    sigma: float
    D: np.ndarray

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float)).copy()
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float)).copy()
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float)).copy()
        D = np.atleast_2d(np.asarray(self.D, dtype=float)).copy()
        for arr in (alpha, beta, gamma, D):
            arr.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "D", D)

        if alpha.shape != (1,):
            raise InvalidInputError("only a scalar association parameter (p_alpha = 1) is supported")
        if not all(np.all(np.isfinite(a)) for a in (alpha, beta, gamma, D)):
            raise InvalidInputError("parameters must be finite")
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise InvalidInputError("sigma must be positive")
        if D.ndim != 2 or D.shape[0] != D.shape[1]:
            raise InvalidInputError(f"D must be square, got shape {D.shape}")
        if not np.allclose(D, D.T, rtol=0, atol=1e-12 * max(1.0, np.abs(D).max())):
            raise NumericalDomainError("D must be symmetric")
        if np.linalg.eigvalsh(D).min() <= 0:
            raise NumericalDomainError("D must be positive definite")

    @property
    def r(self) -> int:
        return self.D.shape[0]

    @property
    def n_free(self) -> int:
        r = self.r
        return self.alpha.size + self.beta.size + self.gamma.size + 1 + r * (r + 1) // 2

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta, self.gamma, [self.sigma], vech(self.D)])

    @classmethod
    def from_vector(cls, vec, p_beta: int, p_gamma: int, r: int) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        expected = 1 + p_beta + p_gamma + 1 + r * (r + 1) // 2
        if vec.shape != (expected,):
            raise InvalidInputError(f"parameter vector has length {vec.size}, expected {expected}")
        i = 1 + p_beta
        j = i + p_gamma
        return cls(vec[:1], vec[1:i], vec[i:j], vec[j], unvech(vec[j + 1:], r))

    def replace(self, **changes) -> "ModelParams":
        fields = dict(alpha=self.alpha, beta=self.beta, gamma=self.gamma, sigma=self.sigma, D=self.D)
        fields.update(changes)
        return ModelParams(**fields)

    def names(self) -> list[str]:
        return parameter_names(self.beta.size, self.gamma.size, self.r)

    def __repr__(self):
        return (
            f"ModelParams(alpha={self.alpha.tolist()}, beta={self.beta.tolist()}, "
            f"gamma={self.gamma.tolist()}, sigma={self.sigma!r}, D={self.D.tolist()})"
        )


def parameter_names(p_beta: int, p_gamma: int, r: int) -> list[str]:
    rows, cols = vech_indices(r)
    return (
        ["alpha"]
        + [f"beta[{k}]" for k in range(p_beta)]
        + [f"gamma[{k}]" for k in range(p_gamma)]
        + ["sigma"]
        + [f"D[{i},{j}]" for i, j in zip(rows, cols)]
    )


def _check_dims(subject: SubjectData, params: ModelParams, b) -> np.ndarray:
    b = np.atleast_1d(np.asarray(b, dtype=float))
    basis = subject.basis
    if params.beta.size != basis.p_fixed:
        raise InvalidInputError(f"beta has length {params.beta.size}, basis expects {basis.p_fixed}")
    if b.shape != (basis.r,) or params.r != basis.r:
        raise InvalidInputError(f"random effects must have length {basis.r}")
    if params.gamma.size != len(subject.baseline_covariates):
        raise InvalidInputError(
            f"gamma has length {params.gamma.size}, subject has {len(subject.baseline_covariates)} covariates"
        )
    return b


def trajectory_mean(subject: SubjectData, params: ModelParams, b, t) -> float:
    """m_i(t) = x(t)' beta + z(t)' b."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    basis = subject.basis
    if params.beta.size != basis.p_fixed or b.shape != (basis.r,):
        raise InvalidInputError("dimension mismatch between basis and beta/b")
    if t < 0:
        raise InvalidInputError("time must be nonnegative")
    x = basis.fixed(t)[0]
    z = basis.random(t)[0]
    return float(x @ params.beta + z @ b)


def log_density_longitudinal(subject: SubjectData, params: ModelParams, b) -> float:
    b = _check_dims(subject, params, b)
    resid = subject.responses - subject.X @ params.beta - subject.Z @ b
    n_i = subject.n_obs
    s2 = params.sigma ** 2
    return float(-0.5 * n_i * (LOG_2PI + math.log(s2)) - resid @ resid / (2.0 * s2))


def log_density_random(params: ModelParams, b) -> float:
    b = np.atleast_1d(np.asarray(b, dtype=float))
    r = params.r
    if b.shape != (r,):
        raise InvalidInputError(f"random effects must have length {r}")
    try:
        chol = np.linalg.cholesky(params.D)
    except np.linalg.LinAlgError as exc:
        raise NumericalDomainError("D is not positive definite") from exc
    u = solve_triangular(chol, b, lower=True)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return float(-0.5 * r * LOG_2PI - 0.5 * logdet - 0.5 * u @ u)


def log_density_event(subject: SubjectData, params: ModelParams, hazard, b) -> float:
    """log p(T, delta | b) against a step cumulative hazard.

    The integral over [0, T] is the finite sum over jumps at or before T.
    """
    b = _check_dims(subject, params, b)
    T = subject.event_time
    jumps = np.asarray(hazard.jump_times)
    incs = np.asarray(hazard.increments)
    k = np.searchsorted(jumps, T, side="right")
    s, ds = jumps[:k], incs[:k]
    lin = float(params.gamma @ subject.w)
    alpha = params.alpha[0]

    cum = 0.0
    if k:
        m = subject.basis.fixed(s) @ params.beta + subject.basis.random(s) @ b
        cum = float(np.exp(lin + alpha * m) @ ds)
    if not subject.event_indicator:
        return -cum
    if k == 0 or jumps[k - 1] != T or ds[-1] <= 0:
        raise InconsistentHazardError(f"subject {subject.id!r}: no hazard jump at event time {T}")
    m_T = trajectory_mean(subject, params, b, T)
    return math.log(ds[-1]) + lin + alpha * m_T - cum


def log_joint(subject: SubjectData, params: ModelParams, hazard, b) -> float:
    """log p(T, delta | b) + log p(y | b) + log p(b)."""
    return (
        log_density_event(subject, params, hazard, b)
        + log_density_longitudinal(subject, params, b)
        + log_density_random(params, b)
    )


def observed_data_loglik(data: Sequence[SubjectData], params: ModelParams, hazard, quad) -> float:
    """sum_i log int p(T_i, delta_i | b) p(y_i | b) p(b) db.

    Each integral uses the subject's adaptively recentred version of ``quad``.
    Terms are combined with an exactly rounded sum, so the result does not
    depend on subject order.
    """
    from .quadrature import posterior_batch

    if quad.nodes.shape[1] != params.r:
        raise InvalidInputError("quadrature dimension does not match the random effects")
    terms = [posterior_batch([s], params, hazard, quad).log_normalizer[0] for s in data]
    return math.fsum(terms)
