import numpy as np
import pytest

from amofa.model import FactorComponent, MixtureModel


def random_component(rng, d, p, weight=1.0, scale=1.0):
    mean = rng.normal(scale=scale, size=d)
    loadings = rng.normal(size=(d, p))
    noise = rng.uniform(0.2, 2.0, size=d)
    return FactorComponent(mean, loadings, noise, weight)


def random_model(rng, d, k, max_p=None, scale=3.0):
    max_p = max(1, min(max_p or d - 1, d - 1))
    w = rng.dirichlet(np.full(k, 2.0))
    comps = [random_component(rng, d, int(rng.integers(1, max_p + 1)), w[j], scale)
             for j in range(k)]
    return MixtureModel.from_components(comps, normalize=True)


def dense_logpdf(comp, x):
    """Gaussian log-density from the explicitly formed covariance."""
    cov = comp.loadings @ comp.loadings.T + np.diag(comp.noise_diag)
    r = np.atleast_2d(x) - comp.mean
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    maha = np.einsum("ij,ij->i", r @ np.linalg.inv(cov), r)
    return -0.5 * (comp.dim * np.log(2 * np.pi) + logdet + maha)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (description, passed, detail); filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {name}: {detail}")
