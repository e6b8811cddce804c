"""Batch sampling and stochastic-gradient-noise statistics."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np

from samlab.errors import CapabilityError, ConfigError, ContractError
from samlab.objectives import ObjectiveEnsemble, as_point
from samlab.rng import generator

log = logging.getLogger(__name__)

EXACT_SUBSET_LIMIT = 10_000


@dataclass(frozen=True)
class BatchPlan:
    """A sampled batch and its split into consecutive micro-batches."""

    gamma: tuple[int, ...]
    micro_size: int

    def __post_init__(self):
        if len(set(self.gamma)) != len(self.gamma):
            raise ContractError("batch indices must be unique")
        if self.micro_size < 1 or len(self.gamma) % self.micro_size:
            raise ConfigError(f"micro size {self.micro_size} must divide batch size {len(self.gamma)}")

    @property
    def batch_size(self) -> int:
        return len(self.gamma)

    @property
    def partition(self) -> list[tuple[int, ...]]:
        m = self.micro_size
        return [self.gamma[j:j + m] for j in range(0, len(self.gamma), m)]

    def indices(self) -> np.ndarray:
        return np.asarray(self.gamma, dtype=np.intp)


def _check_sizes(n, batch_size, micro_size):
    if not 1 <= batch_size <= n:
        raise ConfigError(f"batch size {batch_size} must lie in [1, n={n}]")
    if micro_size < 1 or batch_size % micro_size:
        raise ConfigError(f"micro size {micro_size} must divide batch size {batch_size}")


def sample_indices(n: int, k: int, rng: np.random.Generator, rows: int) -> np.ndarray:
    """``rows`` independent uniform draws of k distinct indices, shape (rows, k).

    Order within a row is itself uniformly random, so consecutive blocks of a
    row form a uniform random partition.
    """
    if k * (k - 1) < n:
        # rejection on i.i.d. tuples: conditional on distinctness this is
        # uniform over ordered k-tuples of distinct indices
        out = rng.integers(0, n, size=(rows, k))
        bad = _has_duplicates(out)
        while bad.any():
            out[bad] = rng.integers(0, n, size=(int(bad.sum()), k))
            bad = _has_duplicates(out)
        return out
    out = np.empty((rows, k), dtype=np.int64)
    chunk = max(1, 2_000_000 // n)
    for lo in range(0, rows, chunk):
        hi = min(rows, lo + chunk)
        keys = rng.random((hi - lo, n))
        out[lo:hi] = np.argsort(keys, axis=1)[:, :k]
    return out


def _has_duplicates(a):
    if a.shape[1] < 2:
        return np.zeros(a.shape[0], dtype=bool)
    s = np.sort(a, axis=1)
    return np.any(s[:, 1:] == s[:, :-1], axis=1)


def sample_batch(n: int, batch_size: int, micro_size: int, rng: np.random.Generator) -> BatchPlan:
    """Draw gamma uniformly without replacement and split it into blocks of ``micro_size``."""
    _check_sizes(n, batch_size, micro_size)
    gamma = sample_indices(n, batch_size, rng, 1)[0]
    return BatchPlan(tuple(int(i) for i in gamma), micro_size)


def sample_batches(n: int, batch_size: int, micro_size: int, rng: np.random.Generator, rows: int) -> np.ndarray:
    """Vectorized ``sample_batch``: returns an index array of shape (rows, batch_size)."""
    _check_sizes(n, batch_size, micro_size)
    return sample_indices(n, batch_size, rng, rows)


@dataclass(frozen=True)
class GradientStatistics:
    mean_grad: np.ndarray
    covariance: np.ndarray
    trace: float
    fisher: np.ndarray
    per_sample_norms: np.ndarray

    def to_json(self, include_covariance: bool = False) -> dict:
        out = {
            "mean_grad": self.mean_grad.tolist(),
            "trace": float(self.trace),
            "fisher_trace": float(np.trace(self.fisher)),
            "per_sample_norms": self.per_sample_norms.tolist(),
        }
        if include_covariance:
            out["covariance"] = self.covariance.ravel(order="C").tolist()
        return out


def grad_stats(ens: ObjectiveEnsemble, x) -> GradientStatistics:
    """Exact population statistics of the per-sample gradients at x."""
    G = ens.grads(as_point(x, ens.dim))
    n = G.shape[0]
    mean = G.mean(axis=0)
    fisher = G.T @ G / n
    xi = G - mean
    cov = xi.T @ xi / n
    cov = 0.5 * (cov + cov.T)
    trace = float(np.trace(cov))
    if trace < 0.0:
        if trace < -1e-10:
            log.warning("negative covariance trace %.3e clamped to 0", trace)
        trace = 0.0
    return GradientStatistics(mean, cov, trace, fisher, np.linalg.norm(G, axis=1))


def batch_grad(ens: ObjectiveEnsemble, x, indices) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.intp).ravel()
    if idx.size == 0:
        raise ContractError("batch_grad needs a non-empty index list")
    return ens.grads_at(as_point(x, ens.dim), idx).mean(axis=0)


@dataclass(frozen=True)
class NormEstimate:
    """E||grad f_gamma(x)|| over uniform size-k subsets (mean-normalized form).

    The sum form E||sum_{i in gamma} grad f_i|| equals ``k * value``.
    """

    value: float
    se: float
    mode: str
    k: int
    subsets: int

    @property
    def sum_form(self) -> float:
        return self.k * self.value


def all_subsets(n: int, k: int) -> np.ndarray:
    count = math.comb(n, k)
    if count > EXACT_SUBSET_LIMIT:
        raise CapabilityError(f"C({n},{k}) = {count} exceeds the exact-enumeration limit {EXACT_SUBSET_LIMIT}")
    return np.array(list(itertools.combinations(range(n), k)), dtype=np.intp).reshape(count, k)


def subset_matrix(n: int, subsets: np.ndarray) -> np.ndarray:
    """Averaging matrix M with (M @ G)[s] = mean of G over subset s."""
    S, k = subsets.shape
    M = np.zeros((S, n))
    np.add.at(M, (np.repeat(np.arange(S), k), subsets.ravel()), 1.0 / k)
    return M


def subset_mean_norms(ens: ObjectiveEnsemble, X, subsets: np.ndarray) -> np.ndarray:
    """||grad f_s(X_r)|| for every point row r and subset s, shape (R, S)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    S, k = subsets.shape
    dense = S * ens.n <= 10_000_000
    M = subset_matrix(ens.n, subsets) if dense else None
    out = np.empty((X.shape[0], S))
    step = max(1, 4_000_000 // max(1, S * ens.dim * (1 if dense else k)))
    for lo in range(0, X.shape[0], step):
        G = ens.grads_at(X[lo:lo + step])
        if dense:
            means = np.einsum("sn,rnd->rsd", M, G)
        else:
            means = G[:, subsets].mean(axis=2)
        out[lo:lo + step] = np.linalg.norm(means, axis=-1)
    return out


def resolve_subsets(n: int, k: int, mode: str = "auto", samples: int = 100_000, seed: int = 0) -> tuple[np.ndarray, str]:
    """Subsets for expectation over size-k batches: full enumeration or a fixed MC draw."""
    if not 1 <= k <= n:
        raise ContractError(f"subset size {k} must lie in [1, {n}]")
    if mode not in ("auto", "exact", "monte_carlo"):
        raise ConfigError(f"unknown expectation mode {mode!r}")
    if mode == "exact" or (mode == "auto" and math.comb(n, k) <= EXACT_SUBSET_LIMIT):
        return all_subsets(n, k), "exact"
    return sample_indices(n, k, generator(seed, "subsets", n, k), samples), "monte_carlo"


def expected_batch_grad_norm(
    ens: ObjectiveEnsemble, x, k: int, mode: str = "exact", samples: int = 100_000, seed: int = 0
) -> NormEstimate:
    x = as_point(x, ens.dim)
    subsets, used = resolve_subsets(ens.n, k, mode, samples, seed)
    norms = subset_mean_norms(ens, x, subsets)[0]
    if used == "exact":
        return NormEstimate(float(norms.mean()), 0.0, used, k, len(norms))
    se = float(norms.std(ddof=1) / math.sqrt(len(norms))) if len(norms) > 1 else float("inf")
    return NormEstimate(float(norms.mean()), se, used, k, len(norms))


@dataclass(frozen=True)
class NormBoundReport:
    lower: float
    value: float
    upper: float
    se: float
    holds: bool


def check_norm_bounds(ens: ObjectiveEnsemble, x, k: int, mode: str = "auto", samples: int = 200_000, seed: int = 0) -> NormBoundReport:
    """||grad f|| <= E||grad f_gamma|| <= sqrt(||grad f||^2 + tr V / k)."""
    stats = grad_stats(ens, x)
    est = expected_batch_grad_norm(ens, x, k, mode=mode, samples=samples, seed=seed)
    g2 = float(stats.mean_grad @ stats.mean_grad)
    lower = math.sqrt(g2)
    upper = math.sqrt(g2 + stats.trace / k)
    tol = 3.0 * est.se if est.mode == "monte_carlo" else 1e-12 * (1.0 + upper)
    holds = lower - tol <= est.value <= upper + tol
    return NormBoundReport(lower, est.value, upper, est.se, holds)
