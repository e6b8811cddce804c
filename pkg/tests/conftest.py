import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from samlab.objectives import make_ensemble

settings.register_profile("samlab", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("samlab")


@pytest.fixture
def hq13():
    """f_i = a_i x^2 / 2 with a = (1, 3)."""
    return make_ensemble("heteroscedastic_quadratic", curvatures=[1.0, 3.0])


@pytest.fixture
def hq_large():
    """Same curvature law, n = 1000, so size-k batches are nearly independent draws."""
    return make_ensemble("heteroscedastic_quadratic", curvatures=[1.0, 3.0], repeat=500)


SMALL_ENSEMBLES = {
    "shifted_quadratic": dict(n=6, d=3, seed=1, eigs=[0.5, 1.0, 2.0]),
    "heteroscedastic_quadratic": dict(n=6, seed=2, d=2),
    "two_basin": dict(n=16),
    "tiny_mlp": dict(n=8, hidden=4),
    "linear": dict(n=5, d=3, seed=3),
}


@pytest.fixture(params=sorted(SMALL_ENSEMBLES))
def small_ens(request):
    return make_ensemble(request.param, **SMALL_ENSEMBLES[request.param])


def near_point(ens, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    return ens.init_point() + scale * rng.standard_normal(ens.dim)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
