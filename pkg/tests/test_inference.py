import math

import numpy as np
import pytest

from jointfit.em import FitConfig, fit
from jointfit.errors import InconsistentHazardError, SingularInformationError
from jointfit.hazard import StepHazard, breslow_update
from jointfit.inference import (
    EfficientInfo,
    ScoreVector,
    attach_inference,
    efficient_information,
    information_from_scores,
    l0_l1,
    longitudinal_score,
    random_effects_score,
    standard_errors,
    subject_scores,
    survival_score,
)
from jointfit.model import ModelParams, log_density_random
from jointfit.quadrature import PosteriorSummary, e_step_subject, gh_rule, posterior_batch
from jointfit.simulate import SimDesign, default_true_params, simulate_dataset

import oracles
from conftest import make_subject, small_dataset

TRUE = ModelParams([0.5], [1.0, 0.5], [-0.5], 0.5, [[1.0, 0.1], [0.1, 0.25]])


def instance(n=15, seed=3, params=TRUE, order=7):
    data = small_dataset(n=n, seed=seed)
    times = sorted({s.event_time for s in data if s.event_indicator})
    hz = StepHazard(times, np.linspace(0.02, 0.1, len(times)))
    return data, hz, params, posterior_batch(data, params, hz, gh_rule(order, 2))


# -- L0 / L1 -----------------------------------------------------------------------


def test_l0_l1_without_covariate_effects():
    data, hz, _, _ = instance()
    p = TRUE.replace(alpha=[0.0], gamma=[0.0])
    post = posterior_batch(data, p, hz, gh_rule(5, 2))
    u = 1.0
    L0, L1, degenerate = l0_l1(data, p, post, u)
    at_risk = [s for s in data if s.event_time >= u]
    assert not degenerate
    assert L0 == pytest.approx(len(at_risk) / len(data), abs=1e-15)
    assert L1[-1] == pytest.approx(sum(s.baseline_covariates[0] for s in at_risk) / len(data), abs=1e-15)


def test_l0_l1_empty_risk_set():
    data, hz, p, post = instance()
    L0, L1, degenerate = l0_l1(data, p, post, max(s.event_time for s in data) + 1.0)
    assert degenerate and L0 == 0.0 and np.all(L1 == 0.0)


def test_l0_l1_matches_brute_force():
    data, hz, p, post = instance()
    posts = post.to_list()
    for u in (0.0, 0.3, 1.1, 2.5):
        L0, L1, _ = l0_l1(data, p, posts, u)
        B0, B1 = oracles.brute_l0_l1(data, p.alpha[0], p.beta, p.gamma, posts, u)
        assert L0 == pytest.approx(B0, rel=1e-10)
        np.testing.assert_allclose(L1, B1, rtol=1e-10, atol=1e-12)


# -- survival score -----------------------------------------------------------------


def test_single_subject_survival_score():
    s = make_subject(T=2.0, delta=True, w=(1.5,), times=(0.0, 1.0), ys=(0.4, 0.9))
    hz = StepHazard([2.0], [0.3])
    post = e_step_subject(s, TRUE, hz, order=9)
    got = survival_score(s, TRUE, hz, [s], [post])
    # alone in the risk set, covariates that do not vary over b cancel against L1/L0
    np.testing.assert_allclose(got[1:], 0.0, atol=1e-13)
    stacked = subject_scores([s], TRUE, hz, [post])[0].stacked
    ref = oracles.brute_scores([s], TRUE, hz.jump_times, hz.increments, [post])[0]
    np.testing.assert_allclose(stacked, ref, rtol=1e-10, atol=1e-12)


def test_censored_without_jumps_scores_zero():
    s = make_subject(T=1.0, delta=False, times=(0.0,), ys=(0.3,))
    other = make_subject("b", T=3.0, delta=True, times=(0.0,), ys=(0.3,))
    hz = StepHazard([3.0], [0.2])
    data = [s, other]
    post = posterior_batch(data, TRUE, hz, gh_rule(5, 2))
    np.testing.assert_array_equal(survival_score(s, TRUE, hz, data, post), np.zeros(4))


def test_survival_score_requires_jump_at_events():
    data, hz, p, post = instance()
    bad = StepHazard(hz.jump_times[1:], hz.increments[1:])
    with pytest.raises(InconsistentHazardError):
        survival_score(data[0], p, bad, data, post)


# -- longitudinal and random-effects scores ---------------------------------------


def test_longitudinal_score_zero_at_stationarity():
    # y = beta + b with two nodes b = +/-1 (intercept column): E[r] = 0 and E||r||^2 = 2 = n_i sigma^2
    p = ModelParams([0.0], [0.5, 1.0], [0.0], 1.0, np.eye(2))
    s = make_subject(times=(0.0, 1.0), ys=(0.5, 1.5))
    nodes = np.array([[1.0, 0.0], [-1.0, 0.0]])
    post = PosteriorSummary("a", 0.0, np.zeros(2), np.diag([1.0, 0.0]), nodes, np.array([0.5, 0.5]),
                            np.zeros(2), np.eye(2))
    np.testing.assert_allclose(longitudinal_score(s, p, post), 0.0, atol=1e-14)


def expected_long(s, post, beta, sigma):
    return sum(w * oracles.log_long(s, beta, sigma, b) for b, w in zip(post.nodes, post.weights))


def test_longitudinal_score_finite_differences():
    data, hz, p, post = instance(n=6)
    h = 1e-6
    for s, ps in zip(data, post.to_list()):
        got = longitudinal_score(s, p, ps)
        fd = []
        for k in range(2):
            e = np.eye(2)[k] * h
            fd.append((expected_long(s, ps, p.beta + e, p.sigma) - expected_long(s, ps, p.beta - e, p.sigma)) / (2 * h))
        fd.append((expected_long(s, ps, p.beta, p.sigma + h) - expected_long(s, ps, p.beta, p.sigma - h)) / (2 * h))
        np.testing.assert_allclose(got, fd, rtol=1e-5, atol=1e-7)


def test_longitudinal_score_scaling():
    p = ModelParams([0.0], [0.4, 0.3], [0.0], 0.8, np.eye(2))
    s = make_subject(times=(0.0, 1.0, 2.0), ys=(0.1, 1.0, 0.2))
    post = e_step_subject(s, p, StepHazard([3.0], [0.1]), order=7)
    c = 3.0
    sc = make_subject(times=(0.0, 1.0, 2.0), ys=tuple(c * v for v in (0.1, 1.0, 0.2)))
    pc = p.replace(beta=c * p.beta)
    scaled_post = type(post)(post.subject_id, post.log_normalizer, c * post.mean, c * c * post.second_moment,
                             c * post.nodes, post.weights, c * post.mode, post.neg_hessian)
    g1 = longitudinal_score(s, p, post)[:2]
    g2 = longitudinal_score(sc, pc, scaled_post)[:2]
    np.testing.assert_allclose(g2, c * g1, rtol=1e-12)
    # the beta score is X'E[r]/sigma^2: linear in the residual scale c
    resid = np.array([r.response for r in s.records]) - s.X @ p.beta - s.Z @ post.mean
    np.testing.assert_allclose(g2, c * s.X.T @ resid / p.sigma**2, rtol=1e-12)


def test_random_effects_score_cases():
    D = np.array([[1.0, 0.2], [0.2, 0.5]])
    p = TRUE.replace(D=D)
    np.testing.assert_allclose(random_effects_score(p, D), 0.0, atol=1e-15)
    p1 = ModelParams([0.0], [0.0, 0.0], [0.0], 1.0, [[2.0]])
    assert random_effects_score(p1, np.array([[3.0]]))[0] == pytest.approx((3.0 - 2.0) / (2 * 4.0), abs=1e-15)


def test_random_effects_score_finite_differences():
    data, hz, p, post = instance(n=5)
    h = 1e-6
    rows, cols = [0, 1, 1], [0, 0, 1]
    for ps in post.to_list():
        got = random_effects_score(p, ps)

        def objective(D):
            q = p.replace(D=D)
            return sum(w * log_density_random(q, b) for b, w in zip(ps.nodes, ps.weights))

        fd = []
        for i, j in zip(rows, cols):
            E = np.zeros((2, 2))
            E[i, j] = E[j, i] = h
            fd.append((objective(p.D + E) - objective(p.D - E)) / (2 * h))
        np.testing.assert_allclose(got, fd, rtol=1e-5, atol=1e-8)


# -- assembled scores and information -------------------------------------------------


def test_score_vector_layout():
    data, hz, p, post = instance(n=8)
    scores = subject_scores(data, p, hz, post)
    sv = scores[0]
    assert isinstance(sv, ScoreVector)
    assert sv.stacked.size == p.n_free == 8
    expected = np.zeros(8)
    expected[:4] += sv.survival_block
    expected[1:3] += sv.longitudinal_block[:2]
    expected[4] = sv.longitudinal_block[2]
    expected[5:] = sv.random_block
    np.testing.assert_array_equal(sv.stacked, expected)


def test_information_trivial_cases():
    assert np.all(information_from_scores(np.zeros((5, 3))).matrix == 0.0)
    S = np.zeros((2, 4))
    S[0, 0] = S[1, 1] = 1.0
    np.testing.assert_array_equal(information_from_scores(S).matrix, np.diag([0.5, 0.5, 0.0, 0.0]))


def test_information_matches_brute_force_scores():
    data, hz, p, post = instance(n=12, seed=4)
    info = efficient_information(data, p, hz, post)
    S = oracles.brute_scores(data, p, hz.jump_times, hz.increments, post.to_list())
    np.testing.assert_allclose(info.matrix, S.T @ S / len(data), rtol=1e-10, atol=1e-12)
    np.testing.assert_array_equal(info.matrix, info.matrix.T)


def test_standard_errors_closed_forms():
    np.testing.assert_allclose(standard_errors(EfficientInfo(np.eye(3), 1.0), 100), 0.1, rtol=1e-14)
    np.testing.assert_allclose(standard_errors(EfficientInfo(np.diag([4.0, 1.0]), 1.0), 1), [0.5, 1.0], rtol=1e-14)


def test_singular_information_lists_directions():
    M = np.diag([1.0, 0.0, 2.0])
    with pytest.raises(SingularInformationError) as err:
        standard_errors(EfficientInfo(M, math.inf, ("a", "b", "c")), 10)
    assert err.value.null_directions[0][0][0] == "b"


def test_attach_inference_on_fit():
    data = small_dataset(n=80, seed=10)
    res = attach_inference(fit(data, FitConfig(quad_order=9)))
    assert res.standard_errors.shape == (8,)
    assert np.all(res.standard_errors > 0)
    assert np.linalg.eigvalsh(res.info_matrix).min() > 0


def test_fixed_blocks_get_nan_errors():
    data = small_dataset(n=40, seed=11)
    res = attach_inference(fit(data, FitConfig(quad_order=7, fixed=("alpha",))))
    assert np.isnan(res.standard_errors[0]) and np.all(np.isfinite(res.standard_errors[1:]))


def test_survival_beta_block_cancels_at_breslow():
    # with x(t) a function of time only, L1/L0 reproduces alpha x(t_k) exactly
    data, hz, p, post = instance(n=20, seed=6)
    bres = breslow_update(data, p, post)
    post = posterior_batch(data, p, bres, gh_rule(7, 2))
    bres = breslow_update(data, p, post)
    total = sum(sv.survival_block for sv in subject_scores(data, p, bres, post))
    np.testing.assert_allclose(total[1:3], 0.0, atol=1e-12)


def test_scores_centred_at_truth():
    # true Lambda_0(t) = lambda_0 t, evaluated on the observed event times
    n = 2000
    design = SimDesign(n_subjects=n, seed=31)
    data = simulate_dataset(design)
    truth = default_true_params()
    times = np.array(sorted({s.event_time for s in data if s.event_indicator}))
    hz = StepHazard(times, design.baseline_rate * np.diff(times, prepend=0.0))
    post = posterior_batch(data, truth, hz, gh_rule(9, 2))
    S = np.array([sv.stacked for sv in subject_scores(data, truth, hz, post)])
    z = S.mean(axis=0) / (S.std(axis=0, ddof=1) / math.sqrt(n))
    assert np.all(np.abs(z) <= 4.0), z
