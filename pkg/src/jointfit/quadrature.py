"""Gauss-Hermite rules, adaptive recentring and the E-step posterior of the random effects."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from .cohort import Cohort, RiskMoments, TensorFactors
from .errors import InconsistentHazardError, InvalidInputError, NumericalDomainError, OptimizationError
from .model import LOG_2PI

MAX_ORDER = 50
MAX_DIM = 3
MODE_TOL = 1e-8
MODE_MAX_ITER = 100


def _log_std_normal(z: np.ndarray) -> np.ndarray:
    r = z.shape[-1]
    return -0.5 * r * LOG_2PI - 0.5 * np.sum(z * z, axis=-1)


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Tensor-product rule for integrals against the standard Gaussian density.

    ``sum(exp(log_weights) * g(nodes))`` approximates ``E[g(Z)]`` with
    ``Z ~ N(0, I_r)``.  An adapted rule keeps that meaning but places its
    nodes at ``centered_at + scale @ z``.
    """

    order: int
    nodes: np.ndarray
    log_weights: np.ndarray
    centered_at: np.ndarray
    scale: np.ndarray

    @property
    def r(self) -> int:
        return self.nodes.shape[1]

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def lebesgue_log_weights(self) -> np.ndarray:
        """Log weights for integrals against Lebesgue measure: ``int f(b) db``."""
        return self.log_weights - _log_std_normal(self.nodes)

    def expect(self, g: Callable) -> np.ndarray:
        """Gaussian expectation of ``g``, which maps an (m, r) node array to (m, ...) values."""
        values = np.asarray(g(self.nodes), dtype=float)
        return np.tensordot(self.weights, values, axes=(0, 0))

    def integrate(self, f: Callable) -> np.ndarray:
        """Lebesgue integral of ``f`` (vectorized over nodes as in :meth:`expect`)."""
        values = np.asarray(f(self.nodes), dtype=float)
        return np.tensordot(np.exp(self.lebesgue_log_weights), values, axes=(0, 0))


def gh_rule(order: int, r: int) -> QuadratureRule:
    """Uncentred Gauss-Hermite rule in probabilists' normalization (weights sum to one)."""
    if not (isinstance(order, (int, np.integer)) and 1 <= order <= MAX_ORDER):
        raise InvalidInputError(f"quadrature order must be an integer in [1, {MAX_ORDER}]")
    if not (isinstance(r, (int, np.integer)) and 1 <= r <= MAX_DIM):
        raise InvalidInputError(f"random-effects dimension must be an integer in [1, {MAX_DIM}]")
    x, w = hermegauss(order)
    logw = np.log(w) - 0.5 * math.log(2.0 * math.pi)
    grids = np.meshgrid(*([x] * r), indexing="ij")
    nodes = np.stack([g.reshape(-1) for g in grids], axis=1)
    lgrids = np.meshgrid(*([logw] * r), indexing="ij")
    log_weights = sum(g.reshape(-1) for g in lgrids)
    return QuadratureRule(int(order), nodes, log_weights, np.zeros(r), np.eye(r))


def _inverse_cholesky(neg_hessian: np.ndarray):
    """Lower Cholesky factors of the inverse of a batch of SPD matrices and their log-determinants."""
    H = 0.5 * (neg_hessian + np.swapaxes(neg_hessian, -1, -2))
    try:
        np.linalg.cholesky(H)
        cov = np.linalg.inv(H)
        cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
        C = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalDomainError("negative Hessian is not positive definite") from exc
    logdet = np.log(np.diagonal(C, axis1=-2, axis2=-1)).sum(axis=-1)
    return C, logdet


def _check_standard(base: QuadratureRule):
    if np.any(base.centered_at != 0) or np.any(base.scale != np.eye(base.r)):
        raise InvalidInputError("adaptation expects an uncentred base rule")


def adapt_rule(base: QuadratureRule, mode, neg_hessian) -> QuadratureRule:
    """Recentre ``base`` at ``mode`` with spread ``neg_hessian^{-1}``.

    Nodes become ``mode + C z`` with ``C C' = neg_hessian^{-1}`` (C lower
    triangular); log weights absorb the Jacobian and the density ratio so
    that :meth:`QuadratureRule.expect` still targets N(0, I).
    """
    _check_standard(base)
    mode = np.atleast_1d(np.asarray(mode, dtype=float))
    H = np.atleast_2d(np.asarray(neg_hessian, dtype=float))
    if mode.shape != (base.r,) or H.shape != (base.r, base.r):
        raise InvalidInputError("mode/neg_hessian dimension does not match the rule")
    C, logdet = _inverse_cholesky(H)
    nodes = mode + base.nodes @ C.T
    log_weights = base.log_weights + logdet + _log_std_normal(nodes) - _log_std_normal(base.nodes)
    return QuadratureRule(base.order, nodes, log_weights, mode, C)


def _adapted_batch(base: QuadratureRule, modes: np.ndarray, neg_hessians: np.ndarray):
    """Adapted nodes (n, Q, r) and Lebesgue log weights (n, Q) for a batch of subjects."""
    C, logdet = _inverse_cholesky(neg_hessians)
    nodes = modes[:, None, :] + base.nodes[None, :, :] @ np.swapaxes(C, -1, -2)
    lw = (base.log_weights - _log_std_normal(base.nodes))[None, :] + logdet[:, None]
    return nodes, lw, C


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    """Quadrature representation of p(b | T, delta, y) for one subject."""

    subject_id: object
    log_normalizer: float
    mean: np.ndarray
    second_moment: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    mode: np.ndarray
    neg_hessian: np.ndarray
    scale: np.ndarray | None = None
    axis_nodes: np.ndarray | None = None

    @property
    def covariance(self) -> np.ndarray:
        return self.second_moment - np.outer(self.mean, self.mean)

    def expectation(self, g: Callable) -> np.ndarray:
        """E[g(b) | data]; ``g`` maps the (Q, r) node array to (Q, ...) values."""
        values = np.asarray(g(self.nodes), dtype=float)
        if values.ndim == 0:
            values = np.full(self.weights.shape, float(values))
        return np.tensordot(self.weights, values, axes=(0, 0))


@dataclass(frozen=True, eq=False)
class PosteriorBatch:
    """Stacked posterior summaries (all subjects share the node count Q)."""

    ids: tuple
    log_normalizer: np.ndarray  # (n,)
    mean: np.ndarray  # (n, r)
    second_moment: np.ndarray  # (n, r, r)
    nodes: np.ndarray  # (n, Q, r)
    weights: np.ndarray  # (n, Q)
    mode: np.ndarray  # (n, r)
    neg_hessian: np.ndarray  # (n, r, r)
    # adaptive transform nodes = mode + scale @ tensor(axis_nodes); None if unknown
    scale: np.ndarray | None = None  # (n, r, r)
    axis_nodes: np.ndarray | None = None  # (o,)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> PosteriorSummary:
        return PosteriorSummary(
            self.ids[i],
            float(self.log_normalizer[i]),
            self.mean[i],
            self.second_moment[i],
            self.nodes[i],
            self.weights[i],
            self.mode[i],
            self.neg_hessian[i],
            None if self.scale is None else self.scale[i],
            self.axis_nodes,
        )

    def to_list(self) -> list[PosteriorSummary]:
        return [self[i] for i in range(len(self))]

    @classmethod
    def from_summaries(cls, summaries: Sequence[PosteriorSummary]) -> "PosteriorBatch":
        summaries = list(summaries)
        if len({s.nodes.shape for s in summaries}) > 1:
            raise InvalidInputError("posterior summaries must share the same node layout")
        structured = all(s.scale is not None and s.axis_nodes is not None for s in summaries) and all(
            np.array_equal(s.axis_nodes, summaries[0].axis_nodes) for s in summaries
        )
        return cls(
            tuple(s.subject_id for s in summaries),
            np.array([s.log_normalizer for s in summaries]),
            np.stack([s.mean for s in summaries]),
            np.stack([s.second_moment for s in summaries]),
            np.stack([s.nodes for s in summaries]),
            np.stack([s.weights for s in summaries]),
            np.stack([s.mode for s in summaries]),
            np.stack([s.neg_hessian for s in summaries]),
            np.stack([s.scale for s in summaries]) if structured else None,
            summaries[0].axis_nodes if structured else None,
        )


# -- batched machinery ------------------------------------------------------


def _event_terms(cohort: Cohort, increments: np.ndarray):
    """log Delta Lambda(T_i) for subjects with an event (0 otherwise)."""
    log_jump = np.zeros(cohort.n)
    ev = cohort.delta
    if np.any(ev & (cohort.event_index < 0)):
        bad = [cohort.subjects[i].id for i in np.flatnonzero(ev & (cohort.event_index < 0))]
        raise InconsistentHazardError(f"no hazard jump at the event time of subject(s) {bad[:5]}")
    jumps = increments[cohort.event_index[ev]]
    if np.any(jumps <= 0):
        raise InconsistentHazardError("zero hazard increment at an observed event time")
    log_jump[ev] = np.log(jumps)
    return log_jump


def mode_search(cohort: Cohort, params, increments, start=None, tol=MODE_TOL, max_iter=MODE_MAX_ITER):
    """Batched Newton ascent on b -> log p(T, delta | b) + log p(y | b) + log p(b).

    Returns (modes, neg_hessians).  The objective is strictly concave in b.
    """
    n, r, K = cohort.n, cohort.r, cohort.K
    alpha = params.alpha[0]
    s2 = params.sigma ** 2
    Dinv = np.linalg.inv(params.D)
    lin = cohort.lin(params)
    xbg = cohort.Xg @ params.beta
    at_risk = np.arange(K)[None, :] < cohort.n_at[:, None]
    dlam = np.where(at_risk, np.asarray(increments, dtype=float)[None, :], 0.0)
    _, Zte0, _ = cohort.residual_stats(params.beta)
    ev_lin = (cohort.delta * alpha)[:, None] * cohort.ZT
    Zg = cohort.Zg

    def evaluate(b):
        eta = lin[:, None] + alpha * (xbg[None, :] + b @ Zg.T)
        e = np.exp(np.minimum(eta, 500.0)) * dlam
        Zb = np.einsum("nrs,ns->nr", cohort.ZtZ, b)
        f = (
            np.sum(ev_lin * b, axis=1)
            - e.sum(axis=1)
            + (np.sum(b * Zte0, axis=1) - 0.5 * np.sum(b * Zb, axis=1)) / s2
            - 0.5 * np.einsum("nr,rs,ns->n", b, Dinv, b)
        )
        g = ev_lin - alpha * (e @ Zg) + (Zte0 - Zb) / s2 - b @ Dinv
        H = alpha * alpha * np.einsum("nk,kr,ks->nrs", e, Zg, Zg) + cohort.ZtZ / s2 + Dinv
        return f, g, H

    b = np.zeros((n, r)) if start is None else np.array(start, dtype=float).reshape(n, r)
    f, g, H = evaluate(b)
    for _ in range(max_iter):
        gnorm = np.linalg.norm(g, axis=1)
        pending = gnorm > tol
        if not np.any(pending):
            return b, H
        d = np.linalg.solve(H, g[..., None])[..., 0]
        d[~pending] = 0.0
        t = np.ones(n)
        accepted = ~pending
        new_b, new_f, new_g, new_H = b.copy(), f.copy(), g.copy(), H.copy()
        for _ in range(60):
            cand = b + t[:, None] * d
            fc, gc, Hc = evaluate(cand)
            ok = ~accepted & (fc >= f - 1e-12 * (1.0 + np.abs(f)))
            new_b[ok], new_f[ok], new_g[ok], new_H[ok] = cand[ok], fc[ok], gc[ok], Hc[ok]
            accepted |= ok
            if np.all(accepted):
                break
            t[~accepted] *= 0.5
        b, f, g, H = new_b, new_f, new_g, new_H
    if np.all(np.linalg.norm(g, axis=1) <= tol):
        return b, H
    raise OptimizationError(
        f"posterior mode search did not converge in {max_iter} iterations "
        f"(max gradient norm {np.linalg.norm(g, axis=1).max():.3e})",
        last_iterate=b,
    )


def e_step(cohort: Cohort, params, increments, base: QuadratureRule, start=None):
    """Posterior summaries for every subject plus risk moments at ``params``.

    One pass over (subject, node, grid) cells gives both the normalized
    posterior weights and the moments reused by the hazard update, the
    M-step and the scores.
    """
    increments = np.asarray(increments, dtype=float)
    if increments.shape != (cohort.K,):
        raise InvalidInputError("hazard increments do not match the cohort grid")
    if base.r != cohort.r:
        raise InvalidInputError("quadrature dimension does not match the random effects")
    _check_standard(base)
    n, K = cohort.n, cohort.K
    alpha = params.alpha[0]
    s2 = params.sigma ** 2
    lin = cohort.lin(params)
    log_jump = _event_terms(cohort, increments)

    modes, H = mode_search(cohort, params, increments, start)
    nodes, lw, scale = _adapted_batch(base, modes, H)

    e0e0, Zte0, _ = cohort.residual_stats(params.beta)
    chol = np.linalg.cholesky(params.D)
    logdetD = 2.0 * np.log(np.diag(chol)).sum()
    Dinv = np.linalg.inv(params.D)
    quad_long = e0e0[:, None] - 2.0 * np.einsum("nqr,nr->nq", nodes, Zte0) + np.einsum(
        "nqr,nrs,nqs->nq", nodes, cohort.ZtZ, nodes
    )
    logj = (
        -0.5 * cohort.n_obs[:, None] * (LOG_2PI + math.log(s2))
        - quad_long / (2.0 * s2)
        - 0.5 * cohort.r * LOG_2PI
        - 0.5 * logdetD
        - 0.5 * np.einsum("nqr,rs,nqs->nq", nodes, Dinv, nodes)
    )
    mT = (cohort.XT @ params.beta)[:, None] + np.einsum("nqr,nr->nq", nodes, cohort.ZT)
    logj += np.where(cohort.delta, log_jump + lin, 0.0)[:, None] + (cohort.delta * alpha)[:, None] * mT

    axis = _axis_nodes(base)
    if K and axis is not None:
        factors = TensorFactors(cohort, modes, scale, axis, params)
        a = lw + logj - factors.node_sums(increments)
        log_norm = logsumexp(a, axis=1)
        _check_finite(log_norm)
        weights = np.exp(a - log_norm[:, None])
        moments = factors.moments(weights, order=2)
    else:
        log_norm, weights, moments = _direct_pass(cohort, params, increments, nodes, lw + logj)

    mean = np.einsum("nq,nqr->nr", weights, nodes)
    second = np.einsum("nq,nqr,nqs->nrs", weights, nodes, nodes)
    ids = tuple(s.id for s in cohort.subjects)
    post = PosteriorBatch(ids, log_norm, mean, second, nodes, weights, modes, H, scale, axis)
    return post, moments


def _check_finite(log_norm):
    if not np.all(np.isfinite(log_norm)):
        raise NumericalDomainError("posterior normalizer is not finite")


def _axis_nodes(base: QuadratureRule):
    """1-d nodes of a tensor Gauss-Hermite rule, or None if ``base`` is not one."""
    x, _ = hermegauss(base.order)
    if base.size != base.order ** base.r:
        return None
    if not np.array_equal(base.nodes[: base.order, -1], x):
        return None
    return x


def _direct_pass(cohort: Cohort, params, increments, nodes, a):
    """Cell-by-cell normalization and risk moments (reference path)."""
    n, K = cohort.n, cohort.K
    alpha = params.alpha[0]
    lin = cohort.lin(params)
    xb = cohort.Xg @ params.beta
    S0, S1, S2 = np.zeros((n, K)), np.zeros((n, K)), np.zeros((n, K))
    log_norm = np.empty(n)
    weights = np.empty(a.shape)
    for idx, kmax in cohort.chunks(nodes.shape[1]):
        ai = a[idx]
        if kmax:
            m, e = cohort.risk_exponentials(idx, kmax, nodes[idx], alpha, xb, lin)
            ai = ai - e @ increments[:kmax]
        ln = logsumexp(ai, axis=1)
        _check_finite(ln)
        pi = np.exp(ai - ln[:, None])
        log_norm[idx] = ln
        weights[idx] = pi
        if kmax:
            pw = pi[:, None, :]
            em = e * m
            S0[idx, :kmax] = (pw @ e)[:, 0, :]
            S1[idx, :kmax] = (pw @ em)[:, 0, :]
            S2[idx, :kmax] = (pw @ (em * m))[:, 0, :]
    return log_norm, weights, RiskMoments(S0, S1, S2)


# -- per-subject API --------------------------------------------------------


def _subject_cohort(subject, hazard) -> Cohort:
    return Cohort([subject], grid=hazard.jump_times)


def posterior_mode(subject, params, hazard, start=None):
    """Mode and negative Hessian of the unnormalized posterior of b."""
    cohort = _subject_cohort(subject, hazard)
    s = None if start is None else np.atleast_2d(start)
    modes, H = mode_search(cohort, params, hazard.increments, s)
    return modes[0], H[0]


def posterior_batch(data, params, hazard, base: QuadratureRule, start=None) -> PosteriorBatch:
    cohort = Cohort(data, grid=hazard.jump_times)
    post, _ = e_step(cohort, params, hazard.increments, base, start)
    return post


def e_step_subject(subject, params, hazard, order: int = 15) -> PosteriorSummary:
    """Adaptive-quadrature posterior summary of b for one subject."""
    base = gh_rule(order, subject.basis.r)
    return posterior_batch([subject], params, hazard, base)[0]
