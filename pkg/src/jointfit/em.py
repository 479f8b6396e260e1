"""Profile-likelihood EM: E-step, profiled hazard update, M-step, convergence control."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import qr

from .cohort import Cohort, RiskMoments
from .errors import InternalError, InvalidInputError
from .hazard import StepHazard, breslow_increments
from .model import LOG_2PI, ModelParams, SubjectData
from .quadrature import PosteriorBatch, e_step, gh_rule

logger = logging.getLogger(__name__)

_SURVIVAL_BLOCKS = ("alpha", "gamma")
_SCHEMES = ("centered", "standard")


@dataclass(frozen=True)
class FitConfig:
    """Tuning knobs for :func:`fit`.

    ``fixed`` names parameter blocks ("alpha", "gamma") held at their
    starting values; ``initial`` overrides the least-squares start.

    ``scheme="standard"`` holds the hazard fixed at its post-E-step Breslow
    value during each M-step and augments with b_i.  ``"centered"`` profiles
    the hazard inside the M-step and augments with u_i = beta_Z + b_i, where
    beta_Z are the fixed effects sharing a column with z(t).  Both climb the
    same observed-data likelihood to the same fixed point; the centered
    scheme needs far fewer iterations when D dominates sigma^2 / n_i.
    """

    quad_order: int = 15
    scheme: str = "centered"
    max_em_iters: int = 200
    param_tol: float = 1e-6
    loglik_tol: float = 1e-8
    mstep_max_iters: int = 50
    mstep_grad_tol: float = 1e-7
    deterministic: bool = True
    fixed: tuple = ()
    initial: ModelParams | None = None

    def __post_init__(self):
        if self.param_tol <= 0 or self.loglik_tol <= 0 or self.mstep_grad_tol <= 0:
            raise InvalidInputError("tolerances must be positive")
        if self.max_em_iters < 1 or self.mstep_max_iters < 1:
            raise InvalidInputError("iteration caps must be at least 1")
        if not 1 <= self.quad_order <= 50:
            raise InvalidInputError("quad_order must lie in [1, 50]")
        if not self.deterministic:
            raise InvalidInputError("the engine has no stochastic path; deterministic must be True")
        if self.scheme not in _SCHEMES:
            raise InvalidInputError(f"scheme must be one of {_SCHEMES}")
        unknown = set(self.fixed) - set(_SURVIVAL_BLOCKS)
        if unknown:
            raise InvalidInputError(f"only {_SURVIVAL_BLOCKS} can be fixed, got {sorted(unknown)}")


@dataclass(eq=False)
class FitResult:
    params_hat: ModelParams
    hazard_hat: StepHazard
    loglik_trace: list
    n_iters: int
    converged: bool
    standard_errors: np.ndarray | None = None
    info_matrix: np.ndarray | None = None
    # state at the final iterate, reused by the inference module
    posteriors: PosteriorBatch | None = field(default=None, repr=False)
    cohort: Cohort | None = field(default=None, repr=False)
    param_trace: list = field(default_factory=list, repr=False)
    fixed: tuple = ()


def initialize(data: Sequence[SubjectData]) -> ModelParams:
    """Pooled least squares for (beta, sigma); D = sigma^2 I; alpha = gamma = 0."""
    if not data:
        raise InvalidInputError("dataset is empty")
    basis = data[0].basis
    X = np.vstack([s.X for s in data])
    y = np.concatenate([s.responses for s in data])
    p = X.shape[1]
    _, R, piv = qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > diag[0] * max(X.shape) * np.finfo(float).eps)) if diag.size else 0
    if rank < p:
        names = basis.fixed_names
        dropped = [names[j] for j in piv[rank:]]
        raise InvalidInputError(f"pooled fixed-effects design is rank deficient; collinear column(s): {dropped}")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    dof = y.size - p if y.size > p else y.size
    s2 = float(resid @ resid) / dof
    if not s2 > 0:
        raise InvalidInputError("responses are fitted exactly by the fixed effects; sigma cannot be initialized")
    q = len(data[0].baseline_covariates)
    return ModelParams([0.0], beta, np.zeros(q), math.sqrt(s2), s2 * np.eye(basis.r))


# -- expected complete-data objective ---------------------------------------


def _surv_terms(cohort: Cohort, post: PosteriorBatch, mom: RiskMoments, inc, params, log_jump):
    """Expected survival log-likelihood with its gradient/Hessian in (alpha, beta, gamma)."""
    p, q = cohort.p, cohort.q
    alpha = params.alpha[0]
    lin = cohort.lin(params)
    delta = cohort.delta.astype(float)
    Em_T = cohort.XT @ params.beta + np.sum(cohort.ZT * post.mean, axis=1)
    S0, S1, S2 = mom
    inc = np.asarray(inc)
    u = S0 @ inc  # sum_k dLambda_k S0_ik
    v = S1 @ inc
    s0 = S0.sum(axis=0)
    s1 = S1.sum(axis=0)
    s2 = S2.sum(axis=0)

    value = float(np.sum(delta * (log_jump + lin + alpha * Em_T)) - u.sum())
    g_alpha = float(delta @ Em_T - v.sum())
    g_beta = alpha * (delta @ cohort.XT) - alpha * (cohort.Xg.T @ (inc * s0))
    g_gamma = delta @ cohort.W - cohort.W.T @ u
    grad = np.concatenate([[g_alpha], g_beta, g_gamma])

    d = 1 + p + q
    H = np.zeros((d, d))
    bs = slice(1, 1 + p)
    gs = slice(1 + p, d)
    H[0, 0] = -inc @ s2
    H[0, bs] = delta @ cohort.XT - cohort.Xg.T @ (inc * (s0 + alpha * s1))
    H[0, gs] = -cohort.W.T @ v
    H[bs, bs] = -alpha * alpha * (cohort.Xg.T * (inc * s0)) @ cohort.Xg
    H[bs, gs] = -alpha * (cohort.Xg.T * inc) @ (S0.T @ cohort.W)
    H[gs, gs] = -(cohort.W.T * u) @ cohort.W
    H = np.triu(H) + np.triu(H, 1).T
    return value, grad, H


def _surv_profile_terms(cohort: Cohort, post: PosteriorBatch, mom: RiskMoments, params):
    """Survival part with the hazard profiled out: jumps d_k / sum_l S0_lk(theta).

    Returns value, gradient, Hessian in (alpha, beta, gamma) and the profiled increments.
    """
    p, q = cohort.p, cohort.q
    alpha = params.alpha[0]
    delta = cohort.delta.astype(float)
    d_k = cohort.event_counts
    Em_T = cohort.XT @ params.beta + np.sum(cohort.ZT * post.mean, axis=1)
    S0, S1, S2 = mom
    s0 = S0.sum(axis=0)
    inc = breslow_increments(d_k, s0)
    ev = d_k > 0
    value = float(
        np.sum(delta * (cohort.lin(params) + alpha * Em_T))
        + np.sum(d_k[ev] * (np.log(d_k[ev]) - np.log(s0[ev]) - 1.0))
    )
    Xg, W = cohort.Xg, cohort.W
    # first derivatives of s0_k, one column per parameter
    ds = np.column_stack([S1.sum(axis=0), alpha * Xg * s0[:, None], S0.T @ W])  # (K, d)
    grad = np.concatenate([[delta @ Em_T], alpha * (delta @ cohort.XT), delta @ W]) - ds.T @ inc

    d = 1 + p + q
    bs = slice(1, 1 + p)
    gs = slice(1 + p, d)
    s1 = S1.sum(axis=0)
    H = np.zeros((d, d))
    H[0, 0] = inc @ S2.sum(axis=0)
    H[0, bs] = Xg.T @ (inc * (s0 + alpha * s1))
    H[0, gs] = W.T @ (S1 @ inc)
    H[bs, bs] = alpha * alpha * (Xg.T * (inc * s0)) @ Xg
    H[bs, gs] = alpha * (Xg.T * inc) @ (S0.T @ W)
    H[gs, gs] = (W.T * (S0 @ inc)) @ W
    H = np.triu(H) + np.triu(H, 1).T
    w = np.divide(inc, s0, out=np.zeros_like(inc), where=s0 > 0)
    H = -(H - (ds.T * w) @ ds)
    H[bs, 0] += delta @ cohort.XT
    H[0, bs] += delta @ cohort.XT
    return value, grad, H, inc


def _long_terms(cohort: Cohort, post: PosteriorBatch, beta, sigma):
    """Expected longitudinal log-likelihood, its beta-gradient and beta-Hessian (sigma fixed)."""
    e0e0, Zte0, Xte0 = cohort.residual_stats(beta)
    s2 = sigma * sigma
    sq = expected_sq_resid(cohort, post, beta)
    value = float(-0.5 * np.sum(cohort.n_obs) * (LOG_2PI + math.log(s2)) - sq.sum() / (2.0 * s2))
    grad = (Xte0.sum(axis=0) - np.einsum("npr,nr->p", cohort.XtZ, post.mean)) / s2
    H = -cohort.XtX.sum(axis=0) / s2
    return value, grad, H


def expected_sq_resid(cohort: Cohort, post: PosteriorBatch, beta) -> np.ndarray:
    """E_b ||y_i - X_i beta - Z_i b||^2 per subject."""
    e0e0, Zte0, _ = cohort.residual_stats(beta)
    return (
        e0e0
        - 2.0 * np.sum(post.mean * Zte0, axis=1)
        + np.einsum("nrs,nsr->n", cohort.ZtZ, post.second_moment)
    )


def _random_value(post: PosteriorBatch, D) -> float:
    n, r = post.mean.shape
    sign, logdet = np.linalg.slogdet(D)
    Dinv = np.linalg.inv(D)
    return float(-0.5 * (n * (r * LOG_2PI + logdet) + np.einsum("rs,nsr->", Dinv, post.second_moment)))


def expected_complete_loglik(cohort, post, inc, params, mom=None) -> float:
    """Q(theta) = sum_i E_b[log p(T_i, delta_i | b) + log p(y_i | b) + log p(b)]."""
    from .quadrature import _event_terms

    if mom is None:
        mom = cohort.risk_moments(post, params, order=2)
    log_jump = _event_terms(cohort, np.asarray(inc))
    sv, _, _ = _surv_terms(cohort, post, mom, inc, params, log_jump)
    lv, _, _ = _long_terms(cohort, post, params.beta, params.sigma)
    return sv + lv + _random_value(post, params.D)


def _m_step(
    cohort: Cohort,
    post: PosteriorBatch,
    mom: RiskMoments,
    inc,
    current: ModelParams,
    config: FitConfig,
    profile: bool = False,
    centered: bool = False,
):
    """Maximize Q over (alpha, beta, gamma), then sigma and D in closed form.

    With ``profile`` the hazard jumps are re-solved at every trial point
    instead of being held at ``inc``; the returned tuple then carries the
    profiled increments at the optimum.  ``centered`` switches to the
    augmentation u_i = beta_Z + b_i (see below) when the basis allows it.
    """
    from .quadrature import _event_terms

    inc = None if profile else np.asarray(inc, dtype=float)
    log_jump = None if profile else _event_terms(cohort, inc)
    p, q = cohort.p, cohort.q
    d = 1 + p + q
    free = np.ones(d, dtype=bool)
    if "alpha" in config.fixed:
        free[0] = False
    if "gamma" in config.fixed:
        free[1 + p:] = False
    # Hierarchical centering: the augmented data are u_i = beta_Z + b_i, so
    # the beta columns shared with z(t) move with the posterior mean in
    # closed form rather than through the Newton step.
    centered = centered and cohort.center_cols is not None
    if centered:
        free[1 + cohort.center_cols] = False

    def unpack(x):
        return current.replace(alpha=x[:1], beta=x[1:1 + p], gamma=x[1 + p:])

    def evaluate(x, moments=None):
        params = unpack(x)
        if moments is None:
            moments = cohort.risk_moments(post, params, order=2)
        if profile:
            sv, sg, sH, jumps = _surv_profile_terms(cohort, post, moments, params)
        else:
            sv, sg, sH = _surv_terms(cohort, post, moments, inc, params, log_jump)
            jumps = inc
        lv, lg, lH = _long_terms(cohort, post, params.beta, params.sigma)
        g = sg.copy()
        g[1:1 + p] += lg
        H = sH.copy()
        H[1:1 + p, 1:1 + p] += lH
        return sv + lv, g[free], H[np.ix_(free, free)], jumps

    x = np.concatenate([current.alpha, current.beta, current.gamma])
    f0, g, H, jumps = evaluate(x, mom)
    f = f0
    for _ in range(config.mstep_max_iters):
        if np.linalg.norm(g) <= config.mstep_grad_tol:
            break
        direction = _ascent_direction(g, H)
        slope = g @ direction
        # once the expected gain is near the roundoff of f, Armijo cannot
        # resolve progress; a full Newton step that shrinks the gradient is kept
        tiny = slope <= 1e-9 * (1.0 + abs(f))
        step = 1.0
        improved = False
        for _ in range(30):
            trial = x.copy()
            trial[free] += step * direction
            ft, gt, Ht, jt = evaluate(trial)
            if np.isfinite(ft) and ft >= f + 1e-4 * step * slope:
                improved = True
                break
            if tiny and np.isfinite(ft) and ft >= f - 1e-12 * (1.0 + abs(f)) and np.linalg.norm(gt) < np.linalg.norm(g):
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        x, f, g, H, jumps = trial, ft, gt, Ht, jt

    if f < f0 - 1e-10 * (1.0 + abs(f0)):
        raise InternalError(f"M-step decreased its objective ({f0!r} -> {f!r})")

    params = unpack(x)
    n_total = float(np.sum(cohort.n_obs))
    sigma = math.sqrt(expected_sq_resid(cohort, post, params.beta).sum() / n_total)
    D = post.second_moment.mean(axis=0)
    if centered:
        shift = post.mean.mean(axis=0)
        beta = params.beta.copy()
        beta[cohort.center_cols] += shift
        D = D - np.outer(shift, shift)
        params = params.replace(beta=beta)
    D = 0.5 * (D + D.T)
    return params.replace(sigma=sigma, D=D), jumps


def _ascent_direction(g, H):
    """Newton direction for maximization, falling back to a damped step if -H is not PD."""
    A = -H
    shift = 0.0
    scale = max(1e-12, np.abs(np.diag(A)).max(initial=0.0))
    for _ in range(60):
        try:
            L = np.linalg.cholesky(A + shift * np.eye(A.shape[0]))
            return np.linalg.solve(L.T, np.linalg.solve(L, g))
        except np.linalg.LinAlgError:
            shift = max(2.0 * shift, 1e-8 * scale)
    return g / scale


def m_step(data, posteriors, hazard: StepHazard, current: ModelParams, config: FitConfig = FitConfig()) -> ModelParams:
    """Maximize the expected complete-data log-likelihood with the hazard held at ``hazard``."""
    cohort = Cohort(data, grid=hazard.jump_times)
    post = posteriors if isinstance(posteriors, PosteriorBatch) else PosteriorBatch.from_summaries(posteriors)
    mom = cohort.risk_moments(post, current, order=2)
    return _m_step(cohort, post, mom, hazard.increments, current, config)[0]


# -- driver -----------------------------------------------------------------


def _validate_for_fit(data, config):
    if not data:
        raise InvalidInputError("dataset is empty")
    estimating_survival = not set(_SURVIVAL_BLOCKS) <= set(config.fixed)
    if estimating_survival and not any(s.event_indicator for s in data):
        raise InvalidInputError("at least one observed event is required")
    if data[0].basis.r > 3:
        raise InvalidInputError("at most three random effects are supported")


def fit(data: Sequence[SubjectData], config: FitConfig = FitConfig()) -> FitResult:
    """Fit the joint model by profile-likelihood EM.

    Each iteration runs the quadrature E-step, then an M-step that updates
    the profiled hazard jumps together with theta (see ``FitConfig.scheme``).
    Stops when both the largest parameter change and the relative
    log-likelihood change fall under their tolerances.  ``hazard_hat`` is
    the profiled update at the final posteriors.
    """
    data = list(data)
    _validate_for_fit(data, config)
    cohort = Cohort(data)
    base = gh_rule(config.quad_order, cohort.r)
    params = config.initial if config.initial is not None else initialize(data)

    # Nelson-Aalen start: with alpha = gamma = 0 every risk weight is one
    at_risk = (np.arange(cohort.K)[None, :] < cohort.n_at[:, None]).sum(axis=0).astype(float)
    inc = breslow_increments(cohort.event_counts, at_risk)

    post, mom = e_step(cohort, params, inc, base)
    trace = [float(math.fsum(post.log_normalizer))]
    param_trace = [params]
    converged = False
    n_iters = 0
    while n_iters < config.max_em_iters:
        if config.scheme == "centered":
            new, inc = _m_step(cohort, post, mom, None, params, config, profile=True, centered=True)
        else:
            inc = breslow_increments(cohort.event_counts, mom.S0.sum(axis=0))
            new, _ = _m_step(cohort, post, mom, inc, params, config)
        n_iters += 1
        change = float(np.max(np.abs(new.to_vector() - params.to_vector())))
        params = new
        post, mom = e_step(cohort, params, inc, base, start=post.mode)
        trace.append(float(math.fsum(post.log_normalizer)))
        param_trace.append(params)
        rel = abs(trace[-1] - trace[-2]) / max(1.0, abs(trace[-1]))
        logger.debug("EM iter %d: loglik=%.10f change=%.3e rel=%.3e", n_iters, trace[-1], change, rel)
        if change <= config.param_tol and rel <= config.loglik_tol:
            converged = True
            break

    # profiled hazard at the final posteriors: the fixed point of the update
    hazard_hat = StepHazard(cohort.grid, breslow_increments(cohort.event_counts, mom.S0.sum(axis=0)))
    return FitResult(
        params_hat=params,
        hazard_hat=hazard_hat,
        loglik_trace=trace,
        n_iters=n_iters,
        converged=converged,
        posteriors=post,
        cohort=cohort,
        param_trace=param_trace,
        fixed=tuple(config.fixed),
    )
