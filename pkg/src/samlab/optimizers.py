"""Discrete update rules: SGD, the SAM/USAM families and Reweighted-SAM.

All rules share one vectorized kernel, :func:`step_many`, which advances a
stack of R independent replicates given their sampled batches (R, B). The
single-trajectory functions (``step_sgd`` ...) wrap it with R = 1.

Every outer gradient is evaluated sample-by-sample at that sample's
(perturbed) point and then averaged over the batch in one fixed layout, so a
rule whose perturbation vanishes reproduces SGD bit for bit.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass

import numpy as np

from samlab.errors import ConfigError, ContractError
from samlab.objectives import ObjectiveEnsemble, as_point
from samlab.rng import generator
from samlab.stochastic import BatchPlan, sample_batches


class Variant(str, enum.Enum):
    SGD = "sgd"
    MINIBATCH_SAM = "minibatch_sam"
    N_SAM = "n_sam"
    M_SAM = "m_sam"
    MINIBATCH_USAM = "minibatch_usam"
    N_USAM = "n_usam"
    M_USAM = "m_usam"
    REWEIGHTED_SAM = "reweighted_sam"

    @property
    def normalized(self) -> bool:
        return self in (Variant.MINIBATCH_SAM, Variant.N_SAM, Variant.M_SAM, Variant.REWEIGHTED_SAM)

    @property
    def uses_micro(self) -> bool:
        return self in (Variant.M_SAM, Variant.M_USAM)

    @property
    def full_batch_perturbation(self) -> bool:
        return self in (Variant.N_SAM, Variant.N_USAM)


@dataclass(frozen=True)
class OptimizerConfig:
    variant: Variant
    eta: float
    rho: float = 0.0
    batch_size: int = 1
    micro_size: int | None = None
    lam: float = 0.5
    delta: float | None = None
    q_probes: int = 1
    grad_norm_floor: float = 1e-12
    normalization: str = "standardize"

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not self.eta >= 0 or not math.isfinite(self.eta):
            raise ConfigError("eta must be a finite non-negative number")
        if self.rho < 0:
            raise ConfigError("rho must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        m = self.batch_size if self.micro_size is None else int(self.micro_size)
        if m < 1 or self.batch_size % m:
            raise ConfigError(f"micro_size {m} must divide batch_size {self.batch_size}")
        object.__setattr__(self, "micro_size", m)
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.grad_norm_floor < 0:
            raise ConfigError("grad_norm_floor must be >= 0")
        if self.normalization not in ("standardize", "none"):
            raise ConfigError("normalization must be 'standardize' or 'none'")
        if self.variant is Variant.REWEIGHTED_SAM:
            if self.delta is None or not self.delta > 0:
                raise ConfigError("reweighted_sam needs a finite-difference step delta > 0")
            if self.q_probes < 1:
                raise ConfigError("q_probes must be >= 1")

    @property
    def blocks(self) -> int:
        return self.batch_size // self.micro_size if self.variant.uses_micro else 1

    @property
    def block_size(self) -> int:
        return self.micro_size if self.variant.uses_micro else self.batch_size

    @classmethod
    def from_mapping(cls, mapping: dict) -> "OptimizerConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        aliases = {"lambda": "lam", "m": "micro_size", "q": "q_probes", "tau": "grad_norm_floor"}
        kw = {}
        for key, val in mapping.items():
            key = aliases.get(key, key)
            if key not in names:
                raise ConfigError(f"unknown optimizer field {key!r}")
            kw[key] = val
        if "variant" not in kw or "eta" not in kw:
            raise ConfigError("optimizer config needs 'variant' and 'eta'")
        return cls(**kw)

    def with_(self, **changes) -> "OptimizerConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class PerturbationResult:
    epsilon: np.ndarray
    raw_norm: float
    guarded: bool


def normalized_direction(v, floor: float = 1e-12) -> PerturbationResult:
    """v / ||v||, or the zero vector (guarded) when ||v|| < floor."""
    v = np.asarray(v, dtype=np.float64)
    nrm = float(np.linalg.norm(v))
    if nrm < floor or nrm == 0.0:
        return PerturbationResult(np.zeros_like(v), nrm, True)
    return PerturbationResult(v / nrm, nrm, False)


@dataclass(frozen=True)
class GibbsWeights:
    weights: np.ndarray
    lambda_used: float
    normalized_scores: np.ndarray

    @property
    def entropy(self) -> float:
        p = self.weights[self.weights > 0]
        return float(-np.sum(p * np.log(p)))


def _normalize_rows(S: np.ndarray, normalization: str):
    if normalization == "none":
        return S, np.zeros(S.shape[0], dtype=bool)
    mu = S.mean(axis=1, keepdims=True)
    sd = S.std(axis=1, keepdims=True)
    flat = sd[:, 0] < 1e-12
    Z = np.where(flat[:, None], 0.0, (S - mu) / np.where(flat[:, None], 1.0, sd))
    return Z, flat


def _gibbs_rows(S: np.ndarray, lam: float, normalization: str):
    Z, flat = _normalize_rows(S, normalization)
    B = S.shape[1]
    if lam == 0.0:
        return np.full(S.shape, 1.0 / B), np.ones(S.shape[0], dtype=bool), Z
    logits = lam * Z
    logits = logits - logits.max(axis=1, keepdims=True)
    W = np.exp(logits)
    W /= W.sum(axis=1, keepdims=True)
    uniform = flat | np.all(logits == 0.0, axis=1)
    W[uniform] = 1.0 / B
    return W, uniform, Z


def gibbs_weights(scores, lam: float, normalization: str = "standardize") -> GibbsWeights:
    """Softmax of lam * (normalized scores); uniform when lam = 0 or scores are flat."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size < 1 or not np.all(np.isfinite(s)):
        raise ContractError("scores must be a non-empty finite vector")
    if lam < 0:
        raise ContractError("lambda must be >= 0")
    if normalization not in ("standardize", "none"):
        raise ContractError("normalization must be 'standardize' or 'none'")
    W, _, Z = _gibbs_rows(s[None, :], float(lam), normalization)
    return GibbsWeights(W[0], float(lam), Z[0])


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def all_sign_vectors(d: int) -> np.ndarray:
    """Every Rademacher vector in {-1, +1}^d, shape (2^d, d)."""
    grid = (np.arange(2 ** d)[:, None] >> np.arange(d)[None, :]) & 1
    return grid.astype(np.float64) * 2.0 - 1.0


def _fd_scores(ens, X, idx, delta, probes):
    """Finite-difference norm estimates; probes has shape (R, B, Q, d)."""
    R, B = idx.shape
    Q = probes.shape[2]
    base = ens.losses_at(X.repeat(B, axis=0), idx.reshape(-1, 1)).reshape(R, B)
    shifted = X[:, None, None, :] + delta * probes
    pidx = np.broadcast_to(idx[:, :, None], (R, B, Q)).reshape(-1, 1)
    moved = ens.losses_at(shifted.reshape(-1, ens.dim), pidx).reshape(R, B, Q)
    quot = (moved - base[:, :, None]) / delta
    return np.sqrt(np.mean(quot * quot, axis=2))


def fd_norm_estimate(ens: ObjectiveEnsemble, i: int, x, delta: float, q_probes: int = 1, rng=None, probes=None) -> float:
    """sqrt(mean_q ((f_i(x + delta z_q) - f_i(x)) / delta)^2) with Rademacher z_q.

    ``probes`` (Q, d) overrides the random draw, e.g. with
    :func:`all_sign_vectors` for an exhaustive estimate.
    """
    if not delta > 0:
        raise ContractError("delta must be > 0")
    x = as_point(x, ens.dim)
    if not 0 <= i < ens.n:
        raise ContractError(f"sample index {i} out of range")
    if probes is None:
        if q_probes < 1:
            raise ContractError("q_probes must be >= 1")
        if rng is None:
            raise ContractError("an rng is required when probes are not given")
        probes = rademacher(rng, (q_probes, ens.dim))
    probes = np.asarray(probes, dtype=np.float64).reshape(1, 1, -1, ens.dim)
    return float(_fd_scores(ens, x[None, :], np.array([[i]]), delta, probes)[0, 0])


def _tree_mean(A, axis):
    """Mean by pairwise halving, so equal entries average exactly when the count is a power of two."""
    A = np.moveaxis(A, axis, 0)
    count = A.shape[0]
    while A.shape[0] > 1 and A.shape[0] % 2 == 0:
        A = A[0::2] + A[1::2]
    total = A[0] if A.shape[0] == 1 else A.sum(axis=0)
    return total / count


def _per_sample_grads(ens, P, idx):
    """grad f_{idx[r,b]} evaluated at P[r,b], shape (R, B, d)."""
    R, B = idx.shape
    return ens.grads_at(P.reshape(R * B, ens.dim), idx.reshape(R * B, 1)).reshape(R, B, ens.dim)


def step_many(ens: ObjectiveEnsemble, X, idx, cfg: OptimizerConfig, rng: np.random.Generator | None = None):
    """Advance R replicates one step. Returns (X_next, guarded_counts)."""
    X = np.asarray(X, dtype=np.float64)
    idx = np.asarray(idx, dtype=np.intp)
    R, B = idx.shape
    d = ens.dim
    if X.shape != (R, d):
        raise ContractError(f"points must have shape {(R, d)}, got {X.shape}")
    if B != cfg.batch_size:
        raise ContractError(f"batch has {B} indices, config says {cfg.batch_size}")
    v = cfg.variant
    guarded = np.zeros(R, dtype=np.int64)
    Xrep = np.broadcast_to(X[:, None, :], (R, B, d))

    if v is Variant.SGD:
        G = _per_sample_grads(ens, Xrep, idx)
        return X - cfg.eta * _tree_mean(G, 1), guarded

    G0 = _per_sample_grads(ens, Xrep, idx)
    J, m = cfg.blocks, cfg.block_size
    if v.full_batch_perturbation:
        all_idx = np.broadcast_to(np.arange(ens.n), (R, ens.n))
        Gn = _per_sample_grads(ens, np.broadcast_to(X[:, None, :], (R, ens.n, d)), all_idx)
        direction = _tree_mean(Gn, 1)[:, None, :]
    elif v is Variant.REWEIGHTED_SAM:
        direction = _reweighted_direction(ens, X, idx, G0, cfg, rng)[:, None, :]
    else:
        direction = _tree_mean(G0.reshape(R, J, m, d), 2)

    if v.normalized:
        nrm = np.linalg.norm(direction, axis=-1, keepdims=True)
        guard = (nrm < cfg.grad_norm_floor) | (nrm == 0.0)
        eps = np.where(guard, 0.0, direction / np.where(guard, 1.0, nrm))
        guarded = guard[..., 0].sum(axis=1)
    else:
        eps = direction
    P = X[:, None, :] + cfg.rho * eps
    n_pts = P.shape[1]
    Psample = np.broadcast_to(P[:, :, None, :], (R, n_pts, B // n_pts, d)).reshape(R, B, d)
    G = _per_sample_grads(ens, Psample, idx)
    return X - cfg.eta * _tree_mean(G, 1), guarded


def _reweighted_direction(ens, X, idx, G0, cfg, rng):
    R, B = idx.shape
    mean_dir = _tree_mean(G0, 1)
    if cfg.lam == 0.0:
        return mean_dir
    if rng is None:
        raise ContractError("reweighted_sam needs an rng for its probes")
    probes = rademacher(rng, (R, B, cfg.q_probes, ens.dim))
    scores = _fd_scores(ens, X, idx, cfg.delta, probes)
    W, uniform, _ = _gibbs_rows(scores, cfg.lam, cfg.normalization)
    weighted = np.einsum("rb,rbd->rd", W, G0)
    return np.where(uniform[:, None], mean_dir, weighted)


@dataclass(frozen=True)
class StepOutcome:
    x: np.ndarray
    guarded: int


def step(ens: ObjectiveEnsemble, x, plan: BatchPlan, cfg: OptimizerConfig, rng=None) -> StepOutcome:
    x = as_point(x, ens.dim)
    if plan.batch_size != cfg.batch_size:
        raise ContractError("plan batch size does not match the config")
    if cfg.variant.uses_micro and plan.micro_size != cfg.micro_size:
        raise ContractError("plan micro partition does not match the config")
    X, g = step_many(ens, x[None, :], plan.indices()[None, :], cfg, rng)
    return StepOutcome(X[0], int(g[0]))


def _step_as(variant):
    def fn(ens, x, plan, cfg, rng=None):
        return step(ens, x, plan, cfg.with_(variant=variant), rng).x

    fn.__name__ = f"step_{variant.value}"
    fn.__doc__ = f"One {variant.value} update; returns x_next."
    return fn


step_sgd = _step_as(Variant.SGD)
step_minibatch_sam = _step_as(Variant.MINIBATCH_SAM)
step_n_sam = _step_as(Variant.N_SAM)
step_m_sam = _step_as(Variant.M_SAM)
step_minibatch_usam = _step_as(Variant.MINIBATCH_USAM)
step_n_usam = _step_as(Variant.N_USAM)
step_m_usam = _step_as(Variant.M_USAM)
step_reweighted_sam = _step_as(Variant.REWEIGHTED_SAM)


def batch_stream(ens, cfg, seed, step_index, rows=1):
    return sample_batches(ens.n, cfg.batch_size, cfg.micro_size, generator(seed, "batch", step_index), rows)


def probe_stream(seed, step_index):
    return generator(seed, "probe", step_index)


def simulate(ens: ObjectiveEnsemble, x0, cfg: OptimizerConfig, steps: int, seed: int, replicates: int = 1, callback=None):
    """Run ``replicates`` independent trajectories for ``steps`` updates.

    Batches for step k come from stream (seed, "batch", k) and probes from
    (seed, "probe", k), so two configs run with the same seed see the same
    batches. ``callback(k, X, guarded)`` is invoked before step k and after
    the last step (k = steps, guarded = None).
    Returns the final stack of points (replicates, d).
    """
    X = np.broadcast_to(as_point(x0, ens.dim), (replicates, ens.dim)).copy()
    for k in range(steps):
        idx = batch_stream(ens, cfg, seed, k, replicates)
        Xn, g = step_many(ens, X, idx, cfg, probe_stream(seed, k))
        if callback is not None:
            callback(k, X, g)
        X = Xn
    if callback is not None:
        callback(steps, X, None)
    return X
