"""Profile score functions, efficient information and standard errors.

Scores are evaluated at a hazard ``Lambda`` and the posterior of each
subject's random effects.  The survival score carries the L1/L0 correction
for the profiled hazard; its sum over subjects is then the gradient of the
profile log-likelihood without differentiating the implicit hazard.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cohort import Cohort
from .errors import InconsistentHazardError, InternalError, NumericalDomainError, SingularInformationError
from .hazard import StepHazard
from .model import ModelParams, parameter_names, vech_indices
from .quadrature import PosteriorBatch, PosteriorSummary

EIGEN_FLOOR = 1e-10


@dataclass(frozen=True)
class ScoreVector:
    """One subject's score split by likelihood factor.

    ``survival_block`` covers (alpha, beta, gamma), ``longitudinal_block``
    covers (beta, sigma) and ``random_block`` covers vech(D).  The blocks
    overlap in beta, so ``stacked`` is their sum embedded in theta order.
    """

    survival_block: np.ndarray
    longitudinal_block: np.ndarray
    random_block: np.ndarray
    p_beta: int
    p_gamma: int

    @property
    def stacked(self) -> np.ndarray:
        return _embed(self.survival_block[None], self.longitudinal_block[None], self.random_block[None],
                      self.p_beta, self.p_gamma)[0]


@dataclass(frozen=True)
class EfficientInfo:
    matrix: np.ndarray
    condition_estimate: float
    names: tuple = ()


def _embed(surv, long, rand, p, q):
    n = surv.shape[0]
    d = 1 + p + q + 1 + rand.shape[1]
    out = np.zeros((n, d))
    out[:, : 1 + p + q] += surv
    out[:, 1 : 1 + p] += long[:, :p]
    out[:, 1 + p + q] = long[:, p]
    out[:, 2 + p + q :] = rand
    return out


def _as_batch(posteriors) -> PosteriorBatch:
    if isinstance(posteriors, PosteriorBatch):
        return posteriors
    if isinstance(posteriors, PosteriorSummary):
        return PosteriorBatch.from_summaries([posteriors])
    return PosteriorBatch.from_summaries(list(posteriors))


def _l_table(cohort: Cohort, mom, params):
    """n L0(t_k) and n L1(t_k) on the cohort grid; L1 columns follow (alpha, beta, gamma)."""
    S0, S1 = mom.S0, mom.S1
    s0 = S0.sum(axis=0)
    l1 = np.column_stack([S1.sum(axis=0), params.alpha[0] * cohort.Xg * s0[:, None], S0.T @ cohort.W])
    return s0, l1


def l0_l1(data: Sequence, params: ModelParams, posteriors, u: float):
    """(L0(u), L1(u), degenerate) averaged over the whole sample.

    ``degenerate`` is True when nobody is at risk at ``u``; L0 and L1 are
    then zero and must not be divided.
    """
    if u < 0:
        raise NumericalDomainError("u must be nonnegative")
    data = list(data)
    cohort = Cohort(data, grid=[float(u)])
    post = _as_batch(posteriors)
    mom = cohort.risk_moments(post, params, order=1)
    s0, l1 = _l_table(cohort, mom, params)
    n = cohort.n
    degenerate = not bool(np.any(cohort.n_at > 0))
    return float(s0[0] / n), l1[0] / n, degenerate


def survival_scores(cohort: Cohort, post: PosteriorBatch, params: ModelParams, increments) -> np.ndarray:
    """Per-subject survival scores over (alpha, beta, gamma), shape (n, 1 + p + q).

    ``cohort.grid`` must hold the hazard's jump times.
    """
    inc = np.asarray(increments, dtype=float)
    alpha = params.alpha[0]
    delta = cohort.delta
    if np.any(delta & (cohort.event_index < 0)):
        raise InconsistentHazardError("every observed event time must be a jump time of the hazard")
    d_s = 1 + cohort.p + cohort.q
    if cohort.K == 0:
        return np.zeros((cohort.n, d_s))
    mom = cohort.risk_moments(post, params, order=1)
    S0, S1 = mom.S0, mom.S1
    s0, l1 = _l_table(cohort, mom, params)
    needed = (inc > 0) | (cohort.event_counts > 0)
    if np.any(needed & ~(s0 > 0)):
        raise InternalError("empty risk set at a hazard jump or event time")
    ratio = np.divide(l1, s0[:, None], out=np.zeros_like(l1), where=s0[:, None] > 0)

    Em_T = cohort.XT @ params.beta + np.sum(cohort.ZT * post.mean, axis=1)
    own = np.column_stack([Em_T, alpha * cohort.XT, cohort.W])
    jump_part = np.zeros_like(own)
    ev = np.flatnonzero(delta)
    jump_part[ev] = own[ev] - ratio[cohort.event_index[ev]]

    wS0 = S0 * inc
    integral = np.column_stack([S1 @ inc, alpha * wS0 @ cohort.Xg, cohort.W * (S0 @ inc)[:, None]])
    integral -= wS0 @ ratio
    return jump_part - integral


def longitudinal_scores(cohort: Cohort, post: PosteriorBatch, params: ModelParams) -> np.ndarray:
    """Per-subject (beta, sigma) scores of E_b log p(y | b), shape (n, p + 1)."""
    from .em import expected_sq_resid

    s2 = params.sigma**2
    _, _, Xte0 = cohort.residual_stats(params.beta)
    g_beta = (Xte0 - np.einsum("npr,nr->np", cohort.XtZ, post.mean)) / s2
    sq = expected_sq_resid(cohort, post, params.beta)
    g_sigma = -cohort.n_obs / params.sigma + sq / params.sigma**3
    return np.column_stack([g_beta, g_sigma])


def random_effects_scores(params: ModelParams, second_moment: np.ndarray) -> np.ndarray:
    """vech(D) scores of E_b log p(b), one row per second-moment matrix."""
    M2 = np.asarray(second_moment, dtype=float)
    if M2.ndim == 2:
        M2 = M2[None]
    try:
        np.linalg.cholesky(params.D)
    except np.linalg.LinAlgError:
        raise NumericalDomainError("D must be positive definite") from None
    Dinv = np.linalg.inv(params.D)
    G = 0.5 * (Dinv @ M2 @ Dinv - Dinv)
    rows, cols = vech_indices(params.r)
    return G[:, rows, cols] * np.where(rows == cols, 1.0, 2.0)


def score_matrix(cohort: Cohort, post: PosteriorBatch, params: ModelParams, increments) -> np.ndarray:
    """Stacked per-subject scores in theta order, shape (n, n_free)."""
    surv = survival_scores(cohort, post, params, increments)
    long = longitudinal_scores(cohort, post, params)
    rand = random_effects_scores(params, post.second_moment)
    return _embed(surv, long, rand, cohort.p, cohort.q)


# -- per-subject entry points -------------------------------------------------


def survival_score(subject, params: ModelParams, hazard: StepHazard, data: Sequence, posteriors) -> np.ndarray:
    """Survival score of ``subject``; L0/L1 average over ``data`` with its ``posteriors``."""
    data = list(data)
    cohort = Cohort(data, grid=hazard.jump_times)
    i = cohort.index_of(subject)
    return survival_scores(cohort, _as_batch(posteriors), params, hazard.increments)[i]


def longitudinal_score(subject, params: ModelParams, posterior: PosteriorSummary) -> np.ndarray:
    cohort = Cohort([subject])
    return longitudinal_scores(cohort, _as_batch(posterior), params)[0]


def random_effects_score(params: ModelParams, posterior) -> np.ndarray:
    """Accepts a PosteriorSummary or a bare E[b b'] matrix."""
    M2 = posterior.second_moment if hasattr(posterior, "second_moment") else posterior
    return random_effects_scores(params, M2)[0]


def subject_scores(data: Sequence, params: ModelParams, hazard: StepHazard, posteriors) -> list[ScoreVector]:
    data = list(data)
    cohort = Cohort(data, grid=hazard.jump_times)
    post = _as_batch(posteriors)
    surv = survival_scores(cohort, post, params, hazard.increments)
    long = longitudinal_scores(cohort, post, params)
    rand = random_effects_scores(params, post.second_moment)
    return [ScoreVector(surv[i], long[i], rand[i], cohort.p, cohort.q) for i in range(cohort.n)]


# -- information and standard errors -------------------------------------------


def information_from_scores(scores: np.ndarray, names=()) -> EfficientInfo:
    """(1/n) sum_i S_i S_i' from an (n, d) score array."""
    S = np.asarray(scores, dtype=float)
    M = S.T @ S / S.shape[0]
    M = 0.5 * (M + M.T)
    try:
        cond = float(np.linalg.cond(M))
    except np.linalg.LinAlgError:
        cond = float("inf")
    return EfficientInfo(M, cond if np.isfinite(cond) else float("inf"), tuple(names))


def efficient_information(data: Sequence, params: ModelParams, hazard: StepHazard, posteriors) -> EfficientInfo:
    data = list(data)
    cohort = Cohort(data, grid=hazard.jump_times)
    S = score_matrix(cohort, _as_batch(posteriors), params, hazard.increments)
    return information_from_scores(S, parameter_names(cohort.p, cohort.q, cohort.r))


def standard_errors(info: EfficientInfo, n: int) -> np.ndarray:
    """sqrt(diag((n I)^-1)); raises SingularInformationError when I is not invertible."""
    M = np.asarray(info.matrix, dtype=float)
    if n < 1:
        raise NumericalDomainError("n must be positive")
    vals, vecs = np.linalg.eigh(M)
    if not vals.size or vals.min() <= EIGEN_FLOOR:
        names = list(info.names) or [f"theta[{k}]" for k in range(M.shape[0])]
        null = []
        for k in np.flatnonzero(vals <= EIGEN_FLOOR):
            v = vecs[:, k]
            top = np.argsort(-np.abs(v))[:3]
            null.append([(names[j], float(v[j])) for j in top])
        raise SingularInformationError(
            f"efficient information is singular (smallest eigenvalue {vals.min():.3e})", null
        )
    cov = (vecs / vals) @ vecs.T / n
    return np.sqrt(np.diag(cov))


def attach_inference(result, free_only: bool = True):
    """Fill ``standard_errors`` and ``info_matrix`` on a FitResult in place.

    Blocks held fixed during the fit get NaN standard errors when
    ``free_only`` is set; the information matrix always spans all of theta.
    """
    cohort, post = result.cohort, result.posteriors
    S = score_matrix(cohort, post, result.params_hat, result.hazard_hat.increments)
    names = parameter_names(cohort.p, cohort.q, cohort.r)
    info = information_from_scores(S, names)
    keep = np.ones(len(names), dtype=bool)
    fixed = getattr(result, "fixed", ())
    if free_only and fixed:
        if "alpha" in fixed:
            keep[0] = False
        if "gamma" in fixed:
            keep[1 + cohort.p : 1 + cohort.p + cohort.q] = False
    sub = EfficientInfo(info.matrix[np.ix_(keep, keep)], info.condition_estimate, tuple(np.array(names)[keep]))
    se = np.full(len(names), np.nan)
    se[keep] = standard_errors(sub, cohort.n)
    result.standard_errors = se
    result.info_matrix = info.matrix
    return result
