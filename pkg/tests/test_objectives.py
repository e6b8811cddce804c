import numpy as np
import pytest
from hypothesis import given, strategies as st

from samlab.errors import ConfigError, ContractError
from samlab.objectives import (
    FAMILIES, HeteroscedasticQuadratic, Linear, ShiftedQuadratic, TinyMLP, TwoBasin,
    from_descriptor, full_grad, full_loss, make_ensemble, sample_grad, sample_hvp, sample_loss,
)
from samlab.stochastic import grad_stats

from conftest import near_point


def test_hq_hand_values(hq13):
    assert full_loss(hq13, [2.0]) == 4.0
    assert full_grad(hq13, [2.0])[0] == 4.0
    assert sample_grad(hq13, 1, [2.0])[0] == 6.0
    assert sample_hvp(hq13, 1, [2.0], [1.0])[0] == 3.0
    assert sample_loss(hq13, 0, [2.0]) == 2.0


def test_centered_shifted_quadratic_is_zero_at_origin():
    ens = ShiftedQuadratic(np.zeros((2, 2)))
    assert full_loss(ens, [0.0, 0.0]) == 0.0
    assert np.array_equal(full_grad(ens, [0.0, 0.0]), [0.0, 0.0])


def test_tiny_mlp_loss_matches_resummation():
    ens = make_ensemble("tiny_mlp")
    x = ens.init_point()
    brute = sum(sample_loss(ens, i, x) for i in range(ens.n)) / ens.n
    assert abs(full_loss(ens, x) - brute) < 1e-12


def _fd_grad(ens, x, i, h=1e-6):
    e = np.eye(ens.dim)
    return np.array([(sample_loss(ens, i, x + h * e[j]) - sample_loss(ens, i, x - h * e[j])) / (2 * h) for j in range(ens.dim)])


def test_gradients_match_central_differences(small_ens):
    x = near_point(small_ens)
    for i in range(min(small_ens.n, 3)):
        g = sample_grad(small_ens, i, x)
        assert np.allclose(g, _fd_grad(small_ens, x, i), atol=1e-6, rtol=1e-6)


def test_hvps_match_differences_of_gradients(small_ens):
    x = near_point(small_ens, 1)
    v = np.random.default_rng(5).standard_normal(small_ens.dim)
    h = 1e-5
    for i in range(min(small_ens.n, 3)):
        fd = (sample_grad(small_ens, i, x + h * v) - sample_grad(small_ens, i, x - h * v)) / (2 * h)
        assert np.allclose(sample_hvp(small_ens, i, x, v), fd, atol=1e-6, rtol=1e-5)


def test_hvp_is_symmetric_for_mlp():
    ens = make_ensemble("tiny_mlp", n=6)
    x = ens.init_point()
    rng = np.random.default_rng(0)
    u, v = rng.standard_normal((2, ens.dim))
    for i in range(ens.n):
        assert abs(u @ sample_hvp(ens, i, x, v) - v @ sample_hvp(ens, i, x, u)) < 1e-12


def test_stacked_evaluators_agree_with_single_point(small_ens):
    rng = np.random.default_rng(2)
    X = small_ens.init_point() + 0.2 * rng.standard_normal((4, small_ens.dim))
    idx = rng.integers(0, small_ens.n, size=(4, 3))
    G = small_ens.grads_at(X, idx)
    for r in range(4):
        for b in range(3):
            assert np.allclose(G[r, b], sample_grad(small_ens, idx[r, b], X[r]), rtol=1e-14, atol=1e-16)
    assert np.allclose(small_ens.mean_grad(X), small_ens.grads_at(X).mean(axis=1), atol=1e-14)


def test_descriptor_round_trip_is_byte_identical(small_ens):
    text = small_ens.descriptor()
    rebuilt = from_descriptor(text)
    assert rebuilt.descriptor() == text
    x = near_point(small_ens, 3)
    assert np.array_equal(rebuilt.grads(x), small_ens.grads(x))


@pytest.mark.parametrize("bad", [[1.0, 2.0], [np.nan], [[1.0]], [np.inf]])
def test_contract_errors_on_bad_points(hq13, bad):
    with pytest.raises(ContractError):
        full_loss(hq13, bad)


def test_index_out_of_range(hq13):
    with pytest.raises(ContractError):
        sample_grad(hq13, 2, [1.0])
    with pytest.raises(ContractError):
        hq13.grads_at(np.ones((1, 1)), [[5]])


def test_unknown_family_and_parameters():
    with pytest.raises(ConfigError):
        make_ensemble("resnet")
    with pytest.raises(ConfigError):
        TinyMLP(width=3)
    with pytest.raises(ConfigError):
        HeteroscedasticQuadratic([1.0, -1.0])
    with pytest.raises(ConfigError):
        ShiftedQuadratic(np.zeros((2, 2)), matrix=[[1.0, 2.0], [0.0, 1.0]])


def test_two_basin_construction():
    tb = TwoBasin()
    assert tb.sharp_min[0] < tb.barrier[0] < tb.flat_min[0]
    assert tb.trace_sharp >= 4 * tb.trace_flat
    assert not tb.in_flat_basin(tb.sharp_min[None])[0]
    assert tb.in_flat_basin(tb.flat_min[None])[0]
    assert np.allclose(full_grad(tb, tb.sharp_min), 0.0, atol=1e-6)
    assert np.allclose(full_grad(tb, tb.flat_min), 0.0, atol=1e-6)
    assert np.array_equal(tb.init_point(), tb.sharp_min)


def test_two_basin_rejects_indistinct_traces():
    with pytest.raises(ConfigError):
        TwoBasin(sharp_width=0.7)


def test_linear_family_is_exactly_linear():
    ens = Linear([[1.0, -2.0], [3.0, 0.5]])
    x = np.array([0.3, -0.7])
    assert np.allclose(ens.losses(x), [0.3 + 1.4, 0.9 - 0.35])
    assert np.array_equal(ens.grads(x), ens.slopes)
    assert np.array_equal(sample_hvp(ens, 0, x, [1.0, 1.0]), [0.0, 0.0])


def test_families_listed():
    assert set(FAMILIES) == {"shifted_quadratic", "heteroscedastic_quadratic", "two_basin", "tiny_mlp"}


def test_duplicate_mlp_has_zero_noise():
    ens = make_ensemble("tiny_mlp", n=4, duplicate=True)
    assert grad_stats(ens, ens.init_point()).trace == 0.0


def test_ensembles_are_immutable(hq13):
    with pytest.raises(ValueError):
        hq13.a[0] = 5.0


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_shifted_quadratic_gradient_is_affine(c, x):
    ens = ShiftedQuadratic([c, [0.0, 0.0]], matrix=[[2.0, 0.5], [0.5, 1.0]])
    x = np.asarray(x)
    assert np.allclose(sample_grad(ens, 0, x), ens.A @ (x - np.asarray(c)), atol=1e-12)


@given(st.floats(-5, 5), st.floats(0.1, 4), st.floats(0.1, 4))
def test_hq_variance_law(x, a1, a2):
    ens = HeteroscedasticQuadratic([a1, a2])
    stats = grad_stats(ens, [x])
    assert np.isclose(stats.trace, np.var([a1, a2]) * x * x, rtol=1e-10, atol=1e-12)
