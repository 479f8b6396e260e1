"""Array view of a dataset used by the vectorized E-step, M-step and scores.

Subjects share one time basis, so the design rows at the hazard's jump times
are computed once.  Subject ``i`` is at risk at grid point ``k`` when
``grid[k] <= T_i``; ``n_at[i]`` counts those grid points.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError

# exponent cap for exp(gamma'w + alpha m); only reached by wild line-search trials
_EXP_CAP = 500.0
_CHUNK_BUDGET = 1 << 20
_AXIS_CAP = 100.0


class RiskMoments(NamedTuple):
    """Posterior risk moments at each (subject, grid time), zero outside the risk set.

    S0[i, k] = E_b[e_ik], S1[i, k] = E_b[e_ik m_ik], S2[i, k] = E_b[e_ik m_ik^2]
    with e_ik = exp(gamma' w_i + alpha m_i(t_k)).
    """

    S0: np.ndarray
    S1: np.ndarray | None
    S2: np.ndarray | None


class Cohort:
    def __init__(self, data: Sequence, grid=None):
        data = tuple(data)
        if not data:
            raise InvalidInputError("dataset is empty")
        basis = data[0].basis
        q = len(data[0].baseline_covariates)
        for s in data:
            if s.basis != basis:
                raise InvalidInputError("all subjects must share one time basis")
            if len(s.baseline_covariates) != q:
                raise InvalidInputError("all subjects must have the same number of baseline covariates")
        self.subjects = data
        self.basis = basis
        self.n = n = len(data)
        self.p = p = basis.p_fixed
        self.r = r = basis.r
        self.q = q

        self.T = np.array([s.event_time for s in data])
        self.delta = np.array([s.event_indicator for s in data], dtype=bool)
        self.W = np.array([s.baseline_covariates for s in data], dtype=float).reshape(n, q)

        if grid is None:
            grid = np.unique(self.T[self.delta])
        self.grid = np.asarray(grid, dtype=float).reshape(-1)
        self.K = K = self.grid.size
        self.Xg = basis.fixed(self.grid) if K else np.zeros((0, p))
        self.Zg = basis.random(self.grid) if K else np.zeros((0, r))
        self.XT = basis.fixed(self.T)
        self.ZT = basis.random(self.T)
        self.n_at = np.searchsorted(self.grid, self.T, side="right")
        idx = np.searchsorted(self.grid, self.T, side="left")
        on_grid = (idx < K) & (self.grid[np.minimum(idx, max(K - 1, 0))] == self.T) if K else np.zeros(n, bool)
        self.event_index = np.where(self.delta & on_grid, idx, -1)
        self.event_counts = np.bincount(self.event_index[self.event_index >= 0], minlength=K).astype(float)

        self.n_obs = np.array([s.n_obs for s in data])
        self.XtX = np.stack([s.X.T @ s.X for s in data])
        self.XtZ = np.stack([s.X.T @ s.Z for s in data])
        self.ZtZ = np.stack([s.Z.T @ s.Z for s in data])
        self.Xty = np.stack([s.X.T @ s.responses for s in data])
        self.Zty = np.stack([s.Z.T @ s.responses for s in data])
        self.yty = np.array([s.responses @ s.responses for s in data])

        self.order = np.argsort(self.n_at, kind="stable")
        self.center_cols = self._center_columns()

    def _center_columns(self):
        """Fixed-effect column matching each random-effect column, or None.

        Columns are compared on every time at which a trajectory is evaluated
        (measurements, event/censoring times and the grid), so the match is
        exact wherever it matters.
        """
        times = np.concatenate([self.T, self.grid] + [s.times for s in self.subjects])
        X, Z = self.basis.fixed(times), self.basis.random(times)
        cols = []
        for j in range(self.r):
            hits = [c for c in range(self.p) if c not in cols and np.array_equal(X[:, c], Z[:, j])]
            if not hits:
                return None
            cols.append(hits[0])
        return np.array(cols)

    # -- helpers -----------------------------------------------------------

    def index_of(self, subject) -> int:
        for i, s in enumerate(self.subjects):
            if s is subject:
                return i
        for i, s in enumerate(self.subjects):
            if s.id == subject.id:
                return i
        raise InvalidInputError(f"subject {subject.id!r} is not part of the dataset")

    def lin(self, params) -> np.ndarray:
        return self.W @ params.gamma

    def residual_stats(self, beta):
        """(e0'e0, Z'e0, X'e0) per subject with e0 = y - X beta."""
        e0e0 = self.yty - 2.0 * self.Xty @ beta + np.einsum("p,npq,q->n", beta, self.XtX, beta)
        Zte0 = self.Zty - np.einsum("npr,p->nr", self.XtZ, beta)
        Xte0 = self.Xty - self.XtX @ beta
        return e0e0, Zte0, Xte0

    def chunks(self, n_nodes: int, budget: int = _CHUNK_BUDGET):
        """Yield (subject indices, kmax) blocks with roughly ``budget`` node x time cells."""
        order = self.order
        start = 0
        while start < self.n:
            stop = start + 1
            while stop < self.n and (stop - start + 1) * n_nodes * max(self.n_at[order[stop]], 1) <= budget:
                stop += 1
            idx = order[start:stop]
            yield idx, int(self.n_at[idx].max())
            start = stop

    def risk_exponentials(self, idx, kmax, nodes, alpha, xb_grid, lin):
        """m and exp(gamma'w + alpha m) on (subject, node, grid) cells, zero outside the risk set.

        ``nodes`` has shape (len(idx), Q, r).
        """
        m = nodes @ self.Zg[:kmax].T + xb_grid[:kmax]
        expo = lin[idx, None, None] + alpha * m
        np.minimum(expo, _EXP_CAP, out=expo)
        at_risk = np.arange(kmax)[None, :] < self.n_at[idx][:, None]
        expo = np.where(at_risk[:, None, :], expo, -np.inf)
        return m, np.exp(expo)

    def risk_moments(self, post, params, order: int = 2) -> RiskMoments:
        """Posterior risk moments over the nodes and weights in ``post``.

        Uses the tensor-product factorization when ``post`` records its
        adaptive transform, else the direct cell-by-cell evaluation.
        """
        if self.K and getattr(post, "scale", None) is not None and getattr(post, "axis_nodes", None) is not None:
            factors = TensorFactors(self, post.mode, post.scale, post.axis_nodes, params)
            return factors.moments(post.weights, order)
        return self.risk_moments_direct(post, params, order)

    def risk_moments_direct(self, post, params, order: int = 2) -> RiskMoments:
        n, K = self.n, self.K
        S0 = np.zeros((n, K))
        S1 = np.zeros((n, K)) if order >= 1 else None
        S2 = np.zeros((n, K)) if order >= 2 else None
        if K == 0:
            return RiskMoments(S0, S1, S2)
        alpha = params.alpha[0]
        xb = self.Xg @ params.beta
        lin = self.lin(params)
        n_nodes = post.nodes.shape[1]
        for idx, kmax in self.chunks(n_nodes):
            if kmax == 0:
                continue
            m, e = self.risk_exponentials(idx, kmax, post.nodes[idx], alpha, xb, lin)
            pi = post.weights[idx][:, None, :]
            S0[idx, :kmax] = (pi @ e)[:, 0, :]
            if order >= 1:
                em = e * m
                S1[idx, :kmax] = (pi @ em)[:, 0, :]
                if order >= 2:
                    S2[idx, :kmax] = (pi @ (em * m))[:, 0, :]
        return RiskMoments(S0, S1, S2)


class TensorFactors:
    """Per-axis factorization of exp(gamma'w + alpha m) over an adapted tensor rule.

    With nodes b_iq = mu_i + C_i x_q and x_q = (x_{a_1}, ..., x_{a_r}),

        m_iqk = c_ik + sum_j g_j[i, a_j, k],   g_j[i, a, k] = (C_i' z(t_k))_j x_a,

    so exp(alpha m) is a product of one factor per tensor axis.  Sums over
    the o^r nodes reduce to batched matrix products, and exp() is evaluated
    on n * r * o * K cells instead of n * o^r * K.
    """

    def __init__(self, cohort: "Cohort", centers, scales, axis_nodes, params):
        alpha = params.alpha[0]
        self.r = cohort.r
        self.o = axis_nodes.size
        n = cohort.n
        at_risk = np.arange(cohort.K)[None, :] < cohort.n_at[:, None]
        self.c = cohort.Xg @ params.beta + centers @ cohort.Zg.T  # (n, K)
        expo = np.clip(cohort.lin(params)[:, None] + alpha * self.c, -_EXP_CAP, _EXP_CAP)
        self.G = np.where(at_risk, np.exp(expo), 0.0)  # (n, K)
        A = np.einsum("nlj,kl->njk", scales, cohort.Zg)  # (n, r, K)
        self.g = A[:, :, None, :] * axis_nodes[None, None, :, None]  # (n, r, o, K)
        self.F = np.exp(np.clip(alpha * self.g, -_AXIS_CAP, _AXIS_CAP))
        self.n = n
        self._cache = {}
        self._pcache = {}

    def _axis(self, j, power):
        key = ("h", j, power)
        if key not in self._cache:
            h = self.F[:, j]
            for _ in range(power):
                h = h * self.g[:, j]
            self._cache[key] = h
        return self._cache[key]

    def _contract(self, pi, powers):
        """sum_q pi_iq prod_j F_j g_j^{powers[j]} at (i, a_j, k), as an (n, K) array."""
        n, o, r = self.n, self.o, self.r
        last = self._axis(r - 1, powers[-1])
        key = powers[-1]
        if key not in self._pcache:
            self._pcache[key] = pi.reshape(n, o ** (r - 1), o) @ last  # (n, o^(r-1), K)
        acc = self._pcache[key]
        for j in range(r - 2, -1, -1):
            h = self._axis(j, powers[j])
            acc = acc.reshape(n, o ** j, o, -1)
            acc = np.einsum("nak,nbak->nbk", h, acc) if j else np.einsum("nak,nak->nk", h, acc[:, 0])
        if r == 1:
            acc = acc[:, 0]
        return acc

    def moments(self, pi, order=2) -> RiskMoments:
        r = self.r
        self._pcache = {}
        zero = (0,) * r
        S0 = self.G * self._contract(pi, zero)
        S1 = S2 = None
        if order >= 1:
            unit = [tuple(1 if i == j else 0 for i in range(r)) for j in range(r)]
            T = sum(self._contract(pi, u) for u in unit) * self.G
            S1 = self.c * S0 + T
            if order >= 2:
                U = 0.0
                for j in range(r):
                    U = U + self._contract(pi, tuple(2 if i == j else 0 for i in range(r)))
                    for l in range(j + 1, r):
                        U = U + 2.0 * self._contract(pi, tuple(1 if i in (j, l) else 0 for i in range(r)))
                S2 = self.c * self.c * S0 + 2.0 * self.c * T + self.G * U
        return RiskMoments(S0, S1, S2)

    def node_sums(self, weights_k):
        """sum_k weights_k[k] * exp(gamma'w + alpha m_iqk) for every node, shape (n, o^r)."""
        n, o, r = self.n, self.o, self.r
        lead = self.G * weights_k[None, :]  # (n, K)
        acc = lead[:, None, :]
        for j in range(r - 1):
            acc = (acc[:, :, None, :] * self.F[:, j][:, None, :, :]).reshape(n, -1, lead.shape[1])
        return (acc @ np.swapaxes(self.F[:, r - 1], 1, 2)).reshape(n, o ** r)
