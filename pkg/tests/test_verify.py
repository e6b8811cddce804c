import math

import numpy as np
import pytest

from samlab.errors import ConfigError
from samlab.objectives import ShiftedQuadratic, make_ensemble
from samlab.optimizers import OptimizerConfig, Variant
from samlab.verify import (
    battery, moment_scaling, one_step_moments, regularization_ordering, select_battery, weak_error_grid,
)


def test_sgd_increment_is_unbiased(hq_large):
    rep = one_step_moments(hq_large, [1.0], OptimizerConfig("sgd", eta=0.01, batch_size=2), replicates=20_000, seed=1)
    assert rep.residual_z < 3.0
    assert rep.remainder_norm < 1e-12
    assert rep.second_z < 4.0


def test_usam_hand_drift(hq_large):
    cfg = OptimizerConfig("minibatch_usam", eta=0.01, rho=0.1, batch_size=2)
    rep = one_step_moments(hq_large, [1.0], cfg, replicates=50_000, seed=2)
    # the hand value assumes independent draws; n = 1000 makes the finite-population term ~1e-3
    assert abs(rep.predicted_first_moment[0] + 2.45) < 2e-3
    assert abs(rep.empirical_first_moment[0] + 2.45) < 3 * rep.first_moment_se[0] + 2e-3
    assert rep.within()


@pytest.mark.parametrize("variant", ["minibatch_sam", "n_sam", "m_sam", "n_usam", "m_usam"])
def test_other_variants_within_tolerance(hq_large, variant):
    cfg = OptimizerConfig(variant, eta=0.05, rho=0.05, batch_size=4, micro_size=2)
    rep = one_step_moments(hq_large, [1.0], cfg, replicates=20_000, seed=3)
    assert rep.within(), rep.to_json()


def test_quadratic_expansion_is_exact(hq_large):
    rep = moment_scaling(hq_large, [1.0], OptimizerConfig("minibatch_sam", eta=0.05, rho=0.05, batch_size=2), replicates=5000)
    assert rep.exact_expansion and rep.passed


def test_remainder_shrinks_on_nonquadratic():
    ens = make_ensemble("two_basin", n=16, jitter=0.2)
    cfg = OptimizerConfig("minibatch_usam", eta=0.1, rho=0.1, batch_size=2)
    rep = moment_scaling(ens, [-0.9], cfg, replicates=20_000)
    assert not rep.exact_expansion
    assert rep.ratio >= 1.5


def test_battery_contents():
    ids = [g for g, _ in battery(2)]
    assert ids == ["const", "x0", "x1", "x0*x0", "x0*x1", "x1*x1", "sqnorm"]
    with pytest.raises(ConfigError):
        select_battery(1, ["x3"])


def test_constant_function_has_zero_error(hq13):
    rep = weak_error_grid(hq13, [1.0], "minibatch_usam", ["const"], [0.1, 0.05], [0.01], T=0.5, replicates=200)
    assert all(c.error == 0.0 and not c.inconclusive for c in rep.cells)
    assert "const" not in rep.eta_slopes


def test_zero_noise_weak_error_is_first_order():
    ens = ShiftedQuadratic(np.zeros((2, 1)))
    rep = weak_error_grid(ens, [1.0], "sgd", ["x0"], [0.04, 0.02, 0.01], [0.0], T=1.0, replicates=2, kappa=10)
    assert 0.8 <= rep.eta_slopes["x0"].slope <= 1.2


def test_weak_grid_rejects_bad_eta(hq13):
    with pytest.raises(ConfigError):
        weak_error_grid(hq13, [1.0], "sgd", ["x0"], [1.5], [0.0], replicates=10)


def test_weak_grid_csv_and_rho_fit(hq13):
    rep = weak_error_grid(hq13, [1.0], "minibatch_usam", ["x0"], [0.1], [0.05, 0.1], T=0.3, replicates=500)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "eta,rho,g_id,error,se,n_rep" and len(lines) == 3
    assert set(rep.rho_fits["x0"]) == {"rho_sq_coefficient", "intercept"}


def test_ordering_usam_coefficients():
    ens = make_ensemble("shifted_quadratic", n=8, d=2, seed=5)
    rep = regularization_ordering(ens, [0.3, -0.2], 0.1, [1, 2, 4, 8])
    assert rep.k_list == [8, 4, 2, 1]
    assert np.allclose(rep.usam_coefficients, [0.00625, 0.0125, 0.025, 0.05], rtol=0, atol=1e-15)
    assert rep.usam_increasing and rep.sam_increasing and not rep.degenerate


def test_ordering_zero_noise_is_degenerate():
    ens = make_ensemble("heteroscedastic_quadratic", curvatures=[2.0] * 8)
    rep = regularization_ordering(ens, [1.0], 0.1, [1, 2, 4, 8])
    assert rep.degenerate and rep.sam_increasing is None
    assert max(rep.sam_expected_norms) - min(rep.sam_expected_norms) < 1e-12
