import numpy as np
import pytest

from jointfit.model import ModelParams, SubjectData, TimeBasis
from jointfit.simulate import SimDesign, simulate_dataset

SLOPE = TimeBasis.from_name("intercept+slope")
INTERCEPT = TimeBasis.from_name("intercept")


def make_subject(sid="a", T=3.0, delta=True, w=(1.0,), times=(0.0, 1.0, 2.0), ys=(0.5, 1.2, 2.1), basis=SLOPE):
    return SubjectData(sid, T, delta, w, tuple(zip(times, ys)), basis)


def random_params(rng, p=2, q=1, r=2):
    A = rng.normal(size=(r, r))
    D = A @ A.T + 0.5 * np.eye(r)
    return ModelParams(
        alpha=[rng.normal(scale=0.5)],
        beta=rng.normal(size=p),
        gamma=rng.normal(scale=0.5, size=q),
        sigma=float(rng.uniform(0.3, 1.5)),
        D=D,
    )


def small_dataset(n=40, seed=0, **kw):
    return simulate_dataset(SimDesign(n_subjects=n, seed=seed, **kw))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[key])
