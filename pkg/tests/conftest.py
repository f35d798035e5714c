import numpy as np
import pytest

from hybridest.data import Dataset, VisitSchedule

ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record a one-line acceptance verdict (printed in the terminal summary)."""
    def _report(line):
        print(line)
        ACCEPTANCE_LINES.append(line)
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_dataset(values, arm, baseline=None, *, onset=None, reasons=None, post=None, weeks=None,
                 smaller_is_better=True, values_are_change=True, **kw):
    values = np.asarray(values, float)
    n, T = values.shape
    onset = np.full(n, -1) if onset is None else np.asarray(onset)
    if post is None:
        vis = np.arange(1, T + 1)
        post = (onset[:, None] >= 0) & (vis[None, :] > onset[:, None])
    return Dataset(
        schedule=VisitSchedule(weeks or tuple(float(4 * (t + 1)) for t in range(T))),
        ids=tuple(f"P{i:03d}" for i in range(n)), arm=arm,
        baseline=np.zeros(n) if baseline is None else baseline, values=values, post_ice=post,
        ice_onset=onset, ice_reason=tuple(reasons) if reasons is not None else (None,) * n,
        persistent_ae=kw.pop("persistent_ae", np.zeros(n, bool)),
        efficacy_deteriorated=kw.pop("efficacy_deteriorated", np.zeros(n, bool)),
        smaller_is_better=smaller_is_better, values_are_change=values_are_change, **kw)


def random_complete(rng, n_per_arm=40, T=3, n_arms=2, effect=-0.5):
    Sigma = np.array([[1.0, 0.6, 0.4], [0.6, 1.2, 0.7], [0.4, 0.7, 1.5]])[:T, :T]
    A = rng.normal(size=(T, T)) * 0.2
    Sigma = Sigma + A @ A.T
    n = n_per_arm * n_arms
    arm = np.repeat(np.arange(n_arms), n_per_arm)
    base = rng.normal(8.0, 1.0, n)
    mu = np.linspace(-0.2, -0.6, T)
    Y = mu + effect * arm[:, None] * np.linspace(0.5, 1, T) - 0.3 * (base - 8)[:, None] \
        + rng.multivariate_normal(np.zeros(T), Sigma, n)
    return Y, arm, base
