import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from samlab.errors import CapabilityError, ConfigError, ContractError
from samlab.objectives import make_ensemble
from samlab.rng import generator
from samlab.stochastic import (
    BatchPlan, all_subsets, batch_grad, check_norm_bounds, expected_batch_grad_norm, grad_stats,
    resolve_subsets, sample_batch, sample_batches, sample_indices, subset_mean_norms,
)


def test_batch_plan_partition_and_validation():
    plan = BatchPlan((4, 1, 7, 2), 2)
    assert plan.partition == [(4, 1), (7, 2)]
    assert plan.batch_size == 4
    with pytest.raises(ContractError):
        BatchPlan((1, 1), 1)
    with pytest.raises(ConfigError):
        BatchPlan((1, 2, 3), 2)


def test_sample_batch_sizes():
    plan = sample_batch(10, 6, 3, generator(0, "t"))
    assert len(set(plan.gamma)) == 6 and all(0 <= i < 10 for i in plan.gamma)
    with pytest.raises(ConfigError):
        sample_batch(5, 6, 1, generator(0))
    with pytest.raises(ConfigError):
        sample_batch(8, 4, 3, generator(0))


@pytest.mark.parametrize("n,k", [(1000, 4), (8, 8), (6, 3)])
def test_sample_indices_distinct_and_uniform(n, k):
    rows = 40_000
    idx = sample_indices(n, k, generator(1, "u"), rows)
    s = np.sort(idx, axis=1)
    assert not np.any(s[:, 1:] == s[:, :-1])
    if n <= 8:
        counts = np.bincount(idx.ravel(), minlength=n)
        expected = rows * k / n
        assert np.all(np.abs(counts - expected) < 5 * math.sqrt(expected))
        first = np.bincount(idx[:, 0], minlength=n)
        assert np.all(np.abs(first - rows / n) < 5 * math.sqrt(rows / n))


def test_streams_are_reproducible_and_distinct():
    a = sample_batches(100, 4, 2, generator(3, "batch", 0), 50)
    b = sample_batches(100, 4, 2, generator(3, "batch", 0), 50)
    c = sample_batches(100, 4, 2, generator(3, "batch", 1), 50)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_grad_stats_hand_values(hq13):
    st_ = grad_stats(hq13, [2.0])
    assert st_.mean_grad[0] == 4.0
    assert st_.covariance[0, 0] == 4.0
    assert st_.fisher[0, 0] == 20.0
    js = st_.to_json(include_covariance=True)
    assert js["covariance"] == [4.0] and js["fisher_trace"] == 20.0


def test_zero_noise_trace_is_zero():
    ens = make_ensemble("heteroscedastic_quadratic", curvatures=[2.0, 2.0, 2.0])
    assert grad_stats(ens, [1.3]).trace == 0.0


def test_batch_grad(hq13):
    assert batch_grad(hq13, [1.0], [0, 1])[0] == 2.0
    with pytest.raises(ContractError):
        batch_grad(hq13, [1.0], [])


def test_expected_norm_exact_hand(hq13):
    est = expected_batch_grad_norm(hq13, [1.0], 1)
    assert est.value == 2.0 and est.se == 0.0 and est.mode == "exact"
    assert expected_batch_grad_norm(hq13, [1.0], 2).sum_form == 4.0


def test_subset_limits():
    with pytest.raises(CapabilityError):
        all_subsets(40, 10)
    subsets, mode = resolve_subsets(40, 10, "auto", samples=100, seed=0)
    assert mode == "monte_carlo" and subsets.shape == (100, 10)
    again, _ = resolve_subsets(40, 10, "auto", samples=100, seed=0)
    assert np.array_equal(subsets, again)
    with pytest.raises(ConfigError):
        resolve_subsets(5, 2, "sometimes")


def test_subset_norm_paths_agree():
    ens = make_ensemble("shifted_quadratic", n=9, d=2, seed=4)
    subsets = all_subsets(9, 3)
    X = np.random.default_rng(0).standard_normal((3, 2))
    dense = subset_mean_norms(ens, X, subsets)
    gathered = np.linalg.norm(ens.grads_at(X)[:, subsets].mean(axis=2), axis=-1)
    assert np.allclose(dense, gathered, atol=1e-13)


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_norm_bounds_hold_on_gaussian_instances(seed, k):
    ens = make_ensemble("shifted_quadratic", n=6, d=3, seed=seed)
    x = generator(seed, "x").standard_normal(3)
    rep = check_norm_bounds(ens, x, k)
    assert rep.holds
    assert rep.lower <= rep.value + 1e-12 and rep.value <= rep.upper + 1e-12


def test_norm_bounds_full_batch_collapse():
    ens = make_ensemble("shifted_quadratic", n=5, d=2, seed=1)
    rep = check_norm_bounds(ens, [0.2, 0.1], 5)
    assert abs(rep.value - rep.lower) < 1e-14


def test_norm_monotone_in_batch_size():
    ens = make_ensemble("shifted_quadratic", n=10, d=3, seed=7)
    x = np.array([0.1, -0.4, 0.2])
    vals = [expected_batch_grad_norm(ens, x, k).value for k in (1, 2, 4, 8)]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
