"""Continuous-time models of the SAM/USAM variants and their Euler-Maruyama integration.

Drift and diffusion evaluators are vectorized over a stack of points
X of shape (R, d). Expectations over batches are taken over uniform subsets
of the batch size k (size-m micro-batches for the m-variants), enumerated
exactly when C(n, k) <= 10^4 and otherwise over one fixed Monte Carlo draw
of subsets that is reused at every point (common random numbers).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from samlab.errors import ConfigError, ContractError, NondifferentiablePointError
from samlab.objectives import ObjectiveEnsemble, as_point
from samlab.optimizers import Variant
from samlab.rng import generator
from samlab.stochastic import resolve_subsets, subset_matrix, subset_mean_norms

log = logging.getLogger(__name__)

SDE_VARIANTS = (
    Variant.SGD,
    Variant.MINIBATCH_USAM, Variant.N_USAM, Variant.M_USAM,
    Variant.MINIBATCH_SAM, Variant.N_SAM, Variant.M_SAM,
)
USAM_FAMILY = (Variant.MINIBATCH_USAM, Variant.N_USAM, Variant.M_USAM)
SAM_FAMILY = (Variant.MINIBATCH_SAM, Variant.N_SAM, Variant.M_SAM)


class ClampError(ArithmeticError):
    """Negative diffusion eigenvalues exceeded the allowed clamp magnitude."""


def _stack(ens, X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != ens.dim:
        raise ContractError(f"points must have dimension {ens.dim}")
    return X, single


def _grad_terms(ens, X):
    """Full gradient, H_bar @ grad and E_i[H_i grad_i] at each row of X."""
    G = ens.grads_at(X)
    g = G.mean(axis=1)
    Hg = ens.hvps_at(X, None, g).mean(axis=1)
    HiGi = ens.hvps_at(X, None, G).mean(axis=1)
    return g, Hg, HiGi


def trace_gradient(ens: ObjectiveEnsemble, X) -> np.ndarray:
    """grad tr V(x) = 2 (mean_i H_i g_i - H_bar g_bar), exact from HVPs."""
    X, single = _stack(ens, X)
    _, Hg, HiGi = _grad_terms(ens, X)
    out = 2.0 * (HiGi - Hg)
    return out[0] if single else out


def usam_drift(ens: ObjectiveEnsemble, X, rho: float, k: int) -> np.ndarray:
    """-grad(f + rho/2 ||grad f||^2 + rho/(2k) tr V)."""
    if k < 1:
        raise ContractError("batch size k must be >= 1")
    X, single = _stack(ens, X)
    g, Hg, HiGi = _grad_terms(ens, X)
    out = -g - rho * Hg - (rho / k) * (HiGi - Hg)
    return out[0] if single else out


def n_usam_drift(ens: ObjectiveEnsemble, X, rho: float) -> np.ndarray:
    """-grad(f + rho/2 ||grad f||^2)."""
    X, single = _stack(ens, X)
    g, Hg, _ = _grad_terms(ens, X)
    out = -g - rho * Hg
    return out[0] if single else out


def _subset_hvp_terms(ens, X, subsets, normalized, G=None, M=None):
    """Per-subset gradient g_s and h1 direction H_s g_s (optionally / ||g_s||)."""
    R = X.shape[0]
    S, k = subsets.shape
    if M is None:
        M = subset_matrix(ens.n, subsets)
    if G is None:
        G = ens.grads_at(X)
    gs = np.einsum("sn,rnd->rsd", M, G)
    pts = np.repeat(X, S, axis=0)
    idx = np.tile(subsets, (R, 1))
    V = np.repeat(gs.reshape(R * S, 1, ens.dim), k, axis=1)
    ws = ens.hvps_at(pts, idx, V).mean(axis=1).reshape(R, S, ens.dim)
    if normalized:
        nrm = np.linalg.norm(gs, axis=-1, keepdims=True)
        ws = np.where(nrm > 0, ws / np.where(nrm > 0, nrm, 1.0), 0.0)
    return gs, ws


def expected_norm_gradient(ens, X, subsets, method="fd"):
    """grad_x E_s ||grad f_s(x)|| over the given subsets.

    ``fd``: central differences, step 1e-5 (1 + ||x||), same subsets at x +/- h.
    ``analytic``: E_s[H_s g_s / ||g_s||].
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if method == "analytic":
        return _subset_hvp_terms(ens, X, subsets, True)[1].mean(axis=1)
    if method != "fd":
        raise ConfigError(f"unknown differentiation method {method!r}")
    R, d = X.shape
    h = 1e-5 * (1.0 + np.linalg.norm(X, axis=1))
    out = np.empty((R, d))
    for j in range(d):
        E = np.zeros(d)
        E[j] = 1.0
        up = subset_mean_norms(ens, X + h[:, None] * E, subsets).mean(axis=1)
        dn = subset_mean_norms(ens, X - h[:, None] * E, subsets).mean(axis=1)
        out[:, j] = (up - dn) / (2.0 * h)
    return out


def sam_drift(
    ens: ObjectiveEnsemble, X, rho: float, variant: str, k: int | None = None,
    method: str = "fd", mode: str = "auto", samples: int = 20_000, seed: int = 0, floor: float = 1e-12,
) -> np.ndarray:
    """-grad(f + rho E||grad f_k||) for minibatch/m; -grad(f + rho ||grad f||) for n.

    The mean-gradient form rho * E||grad f_S|| equals the sum form
    (rho / k) E||sum_{i in S} grad f_i||.
    """
    X, single = _stack(ens, X)
    if variant in ("n", Variant.N_SAM, "n_sam"):
        g, Hg, _ = _grad_terms(ens, X)
        nrm = np.linalg.norm(g, axis=1, keepdims=True)
        if np.any(nrm < floor):
            raise NondifferentiablePointError("||grad f|| vanishes; the n-SAM regularizer has no gradient here")
        out = -g - rho * Hg / nrm
    elif variant in ("minibatch", "m", Variant.MINIBATCH_SAM, Variant.M_SAM, "minibatch_sam", "m_sam"):
        if k is None:
            raise ContractError("minibatch/m SAM drift needs a batch size k")
        subsets, _ = resolve_subsets(ens.n, k, mode, samples, seed)
        g = ens.mean_grad(X)
        out = -g - rho * expected_norm_gradient(ens, X, subsets, method)
    else:
        raise ConfigError(f"unknown SAM variant {variant!r}")
    return out[0] if single else out


def sigma00(ens: ObjectiveEnsemble, X, k: int) -> np.ndarray:
    """Covariance of a size-k batch gradient under independent draws: V(x) / k."""
    X, single = _stack(ens, X)
    G = ens.grads_at(X)
    xi = G - G.mean(axis=1, keepdims=True)
    V = np.einsum("rni,rnj->rij", xi, xi) / ens.n
    out = V / k
    return out[0] if single else out


def sigma01(ens: ObjectiveEnsemble, X, rho_variant: Variant, k: int, mode="auto", samples=20_000, seed=0) -> np.ndarray:
    """Cross covariance Cov(h0, h1) between the batch gradient and its rho-correction."""
    X, single = _stack(ens, X)
    subsets, _ = resolve_subsets(ens.n, k, mode, samples, seed)
    out = _cross_covariance(*_correction_terms(ens, X, Variant(rho_variant), subsets))
    return out[0] if single else out


def _correction_terms(ens, X, v, subsets, G=None, M=None):
    if M is None:
        M = subset_matrix(ens.n, subsets)
    if G is None:
        G = ens.grads_at(X)
    if v in (Variant.N_USAM, Variant.N_SAM):
        u = G.mean(axis=1)
        if v is Variant.N_SAM:
            nrm = np.linalg.norm(u, axis=1, keepdims=True)
            u = np.where(nrm > 0, u / np.where(nrm > 0, nrm, 1.0), 0.0)
        gs = np.einsum("sn,rnd->rsd", M, G)
        ws = np.einsum("sn,rnd->rsd", M, ens.hvps_at(X, None, u))
        return gs, ws
    if v in (Variant.MINIBATCH_USAM, Variant.M_USAM, Variant.MINIBATCH_SAM, Variant.M_SAM):
        return _subset_hvp_terms(ens, X, subsets, v in SAM_FAMILY, G, M)
    raise ConfigError(f"no rho-correction for variant {v.value}")


def _cross_covariance(gs, ws):
    gc = gs - gs.mean(axis=1, keepdims=True)
    wc = ws - ws.mean(axis=1, keepdims=True)
    return np.einsum("rsi,rsj->rij", gc, wc) / gs.shape[1]


@dataclass(frozen=True)
class DiffusionFactor:
    factor: np.ndarray
    covariance: np.ndarray
    clamp: np.ndarray
    clamp_ratio: np.ndarray


def psd_sqrt(C: np.ndarray):
    """Symmetric square root with negative eigenvalues clamped to zero.

    Returns (root, clamp) where clamp is the largest clamped |eigenvalue|.
    """
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    if C.shape[-1] == 1:
        return np.sqrt(np.maximum(C, 0.0)), np.maximum(-C[..., 0, 0], 0.0)
    w, U = np.linalg.eigh(C)
    clamp = np.maximum(-w, 0.0).max(axis=-1)
    root = (U * np.sqrt(np.maximum(w, 0.0))[..., None, :]) @ np.swapaxes(U, -1, -2)
    return root, clamp


def diffusion_covariance(ens, X, rho, variant, k, order="with_sigma01", mode="auto", samples=20_000, seed=0):
    v = Variant(variant)
    C = sigma00(ens, X, k)
    if order == "with_sigma01" and rho > 0 and v is not Variant.SGD:
        S01 = sigma01(ens, X, v, k, mode, samples, seed)
        C = C + rho * (S01 + np.swapaxes(S01, -1, -2))
    elif order not in ("sigma00_only", "with_sigma01"):
        raise ConfigError(f"unknown diffusion order {order!r}")
    return C


def diffusion_factor(
    ens: ObjectiveEnsemble, X, rho: float, variant, k: int, order: str = "with_sigma01",
    scale: float = 1.0, mode="auto", samples=20_000, seed=0,
) -> DiffusionFactor:
    """S with S S^T = scale * Sigma^{variant}, Sigma = Sigma00 + rho (Sigma01 + Sigma01^T)."""
    C = scale * diffusion_covariance(ens, X, rho, variant, k, order, mode, samples, seed)
    S, clamp = psd_sqrt(C)
    fro = np.linalg.norm(C, axis=(-2, -1))
    ratio = np.where(fro > 0, clamp / np.where(fro > 0, fro, 1.0), 0.0)
    return DiffusionFactor(S, C, clamp, ratio)


@dataclass
class SDEModel:
    """Drift b(x) and diffusion factor S(x) for one optimizer variant.

    ``scale`` is eta for SGD/minibatch/n variants and m * eta / |gamma| for
    the m-variants; the integrator multiplies S by sqrt(dt) on top of it.
    """

    ens: ObjectiveEnsemble
    variant: Variant
    eta: float
    rho: float
    batch_size: int
    micro_size: int | None = None
    order: str = "with_sigma01"
    method: str = "analytic"
    mode: str = "auto"
    samples: int = 20_000
    seed: int = 0
    max_clamp_ratio: float = 1e-6
    _subsets: np.ndarray | None = field(default=None, repr=False)
    _M: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.variant not in SDE_VARIANTS:
            raise ConfigError(f"no SDE model for variant {self.variant.value}")
        if self.micro_size is None:
            self.micro_size = self.batch_size
        if self.batch_size % self.micro_size:
            raise ConfigError("micro_size must divide batch_size")
        if not 0 < self.eta:
            raise ConfigError("eta must be > 0")
        if self.order not in ("sigma00_only", "with_sigma01"):
            raise ConfigError(f"unknown diffusion order {self.order!r}")
        if self.method not in ("fd", "analytic"):
            raise ConfigError(f"unknown differentiation method {self.method!r}")
        if self.variant is not Variant.SGD:
            self._subsets, _ = resolve_subsets(self.ens.n, self.k, self.mode, self.samples, self.seed)
            self._M = subset_matrix(self.ens.n, self._subsets)

    @property
    def k(self) -> int:
        return self.micro_size if self.variant.uses_micro else self.batch_size

    @property
    def scale(self) -> float:
        if self.variant.uses_micro:
            return self.micro_size * self.eta / self.batch_size
        return self.eta

    def drift(self, X) -> np.ndarray:
        v, rho = self.variant, self.rho
        if v is Variant.SGD or rho == 0.0:
            X, single = _stack(self.ens, X)
            out = -self.ens.mean_grad(X)
            return out[0] if single else out
        if v is Variant.N_USAM:
            return n_usam_drift(self.ens, X, rho)
        if v in USAM_FAMILY:
            return usam_drift(self.ens, X, rho, self.k)
        if v is Variant.N_SAM:
            return sam_drift(self.ens, X, rho, "n")
        X, single = _stack(self.ens, X)
        out = -self.ens.mean_grad(X) - rho * expected_norm_gradient(self.ens, X, self._subsets, self.method)
        return out[0] if single else out

    def diffusion(self, X) -> DiffusionFactor:
        df = diffusion_factor(self.ens, X, self.rho, self.variant, self.k, self.order, self.scale, self.mode, self.samples, self.seed)
        self._check_clamp(df.clamp_ratio)
        return df

    def _check_clamp(self, ratio):
        worst = float(np.max(ratio)) if np.size(ratio) else 0.0
        if worst > self.max_clamp_ratio:
            raise ClampError(f"diffusion clamp {worst:.3e} x ||Sigma||_F exceeds the allowed {self.max_clamp_ratio:.1e}")

    def coefficients(self, X):
        """Drift b (R, d) and diffusion factor S (R, d, d) at each row, sharing one gradient pass."""
        ens, v, rho = self.ens, self.variant, self.rho
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        G = ens.grads_at(X)
        g = G.mean(axis=1)
        xi = G - g[:, None, :]
        C = np.einsum("rni,rnj->rij", xi, xi) / (ens.n * self.k)
        if v is Variant.SGD or rho == 0.0:
            b = -g
        else:
            gs, ws = _correction_terms(ens, X, v, self._subsets, G, self._M)
            if self.order == "with_sigma01":
                S01 = _cross_covariance(gs, ws)
                C = C + rho * (S01 + np.swapaxes(S01, -1, -2))
            if v in (Variant.MINIBATCH_SAM, Variant.M_SAM):
                if self.method == "analytic":
                    b = -g - rho * ws.mean(axis=1)
                else:
                    b = -g - rho * expected_norm_gradient(ens, X, self._subsets, "fd")
            else:
                Hg = ens.hvps_at(X, None, g).mean(axis=1)
                if v is Variant.N_SAM:
                    nrm = np.linalg.norm(g, axis=1, keepdims=True)
                    if np.any(nrm < 1e-12):
                        raise NondifferentiablePointError("||grad f|| vanishes; the n-SAM regularizer has no gradient here")
                    b = -g - rho * Hg / nrm
                elif v is Variant.N_USAM:
                    b = -g - rho * Hg
                else:
                    HiGi = ens.hvps_at(X, None, G).mean(axis=1)
                    b = -g - rho * Hg - (rho / self.k) * (HiGi - Hg)
        C = self.scale * C
        S, clamp = psd_sqrt(C)
        fro = np.linalg.norm(C, axis=(-2, -1))
        self._check_clamp(np.where(fro > 0, clamp / np.where(fro > 0, fro, 1.0), 0.0))
        return b, S


@dataclass(frozen=True)
class SDEPath:
    times: np.ndarray
    states: np.ndarray
    seed: int
    diverged: np.ndarray

    def to_csv(self, path=None, with_seed_column: bool = False) -> str:
        """Rows t, x_0..x_{d-1}, flag for each path (paths stacked when several)."""
        n_t, n_p, d = self.states.shape
        head = (["seed", "path"] if with_seed_column else ["path"]) + ["t"] + [f"x_{j}" for j in range(d)] + ["flag"]
        lines = [",".join(head)]
        for p in range(n_p):
            flag = "diverged" if self.diverged[p] else "ok"
            for i in range(n_t):
                row = ([str(self.seed)] if with_seed_column else []) + [str(p), repr(float(self.times[i]))]
                row += [repr(float(v)) for v in self.states[i, p]] + [flag]
                lines.append(",".join(row))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def integrate(model: SDEModel, x0, T: float, substeps_per_eta: int = 10, seed: int = 0, paths: int = 1, record_every: int = 1, observer=None) -> SDEPath:
    """Euler-Maruyama with dt = eta / kappa: X += b dt + S sqrt(dt) xi.

    States are recorded every ``record_every`` substeps (use kappa to record
    at multiples of eta). Paths whose norm exceeds 1e8 are flagged and frozen.
    With ``observer``, ``observer(X)`` is stored instead of the raw states.
    """
    snap = (lambda Z: Z.copy()) if observer is None else observer
    if substeps_per_eta < 1:
        raise ContractError("substeps_per_eta must be >= 1")
    if T < 0:
        raise ContractError("T must be >= 0")
    ens = model.ens
    x0 = as_point(x0, ens.dim)
    dt = model.eta / substeps_per_eta
    n_steps = int(round(T / dt))
    X = np.broadcast_to(x0, (paths, ens.dim)).copy()
    diverged = np.zeros(paths, dtype=bool)
    times, states = [0.0], [snap(X)]
    sq = math.sqrt(dt)
    for s in range(n_steps):
        xi = generator(seed, "sde", s).standard_normal((paths, ens.dim))
        if diverged.any():
            live = ~diverged
            if not live.any():
                break
            Xl, xi = X[live], xi[live]
        else:
            live, Xl = None, X
        b, S = model.coefficients(Xl)
        noise = S[:, :, 0] * xi if ens.dim == 1 else np.einsum("rij,rj->ri", S, xi)
        Xl = Xl + b * dt + sq * noise
        bad = ~np.all(np.isfinite(Xl), axis=1) | (np.einsum("ri,ri->r", Xl, Xl) > 1e16)
        if live is None:
            X = Xl
            where = np.flatnonzero(bad)
        else:
            X[live] = Xl
            where = np.flatnonzero(live)[bad]
        if where.size:
            diverged[where] = True
            log.warning("%d path(s) diverged at t=%.4g", where.size, (s + 1) * dt)
        if (s + 1) % record_every == 0:
            times.append((s + 1) * dt)
            states.append(snap(X))
    return SDEPath(np.array(times), np.stack(states), seed, diverged)
