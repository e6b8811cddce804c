"""Synthetic per-sample objective ensembles with exact derivative oracles.

Every ensemble exposes vectorized evaluators over a stack of points ``X`` of
shape ``(R, d)`` and per-point index lists ``idx`` of shape ``(R, B)``; the
single-point helpers (``sample_grad``, ``full_grad``...) are thin wrappers.
Ensembles are immutable after construction.
"""

from __future__ import annotations

import json
from typing import Any

import numpy as np
from scipy import optimize

from samlab.errors import ConfigError, ContractError
from samlab.rng import generator

FAMILIES = ("shifted_quadratic", "heteroscedastic_quadratic", "two_basin", "tiny_mlp")
HELPER_FAMILIES = ("linear",)


def as_point(x, dim: int) -> np.ndarray:
    """Validate a parameter vector: finite, 1-D, dimension ``dim``."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != dim:
        raise ContractError(f"expected a vector of dimension {dim}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("parameter vector has non-finite entries")
    return arr


class ObjectiveEnsemble:
    """Base class: n per-sample losses f_i over R^d.

    Subclasses implement ``_losses``, ``_grads`` and ``_hvps`` on stacked
    inputs (X: (R, d), idx: (R, B), V: (R, B, d)).
    """

    family = ""

    def __init__(self, n: int, dim: int, params: dict[str, Any]):
        if n < 1 or dim < 1:
            raise ConfigError("ensemble needs n >= 1 and d >= 1")
        self.n = int(n)
        self.dim = int(dim)
        self.params = dict(params)

    # -- descriptor -------------------------------------------------------
    def descriptor(self) -> str:
        return json.dumps({"family": self.family, **self.params}, sort_keys=True, separators=(",", ":"))

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.descriptor()})"

    def init_point(self) -> np.ndarray:
        return np.zeros(self.dim)

    # -- stacked evaluators -----------------------------------------------
    def _stack(self, X, idx):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ContractError(f"points must have trailing dimension {self.dim}, got {X.shape}")
        if idx is None:
            idx = np.broadcast_to(np.arange(self.n), (X.shape[0], self.n))
        else:
            idx = np.asarray(idx, dtype=np.intp)
            if idx.ndim == 1:
                idx = np.broadcast_to(idx, (X.shape[0], idx.shape[0]))
            if idx.shape[0] != X.shape[0]:
                raise ContractError("index array and point stack disagree on leading size")
            if idx.size and (idx.min() < 0 or idx.max() >= self.n):
                raise ContractError(f"sample index out of range [0, {self.n})")
        return X, idx, single

    def losses_at(self, X, idx=None) -> np.ndarray:
        X, idx, single = self._stack(X, idx)
        out = self._losses(X, idx)
        return out[0] if single else out

    def grads_at(self, X, idx=None) -> np.ndarray:
        X, idx, single = self._stack(X, idx)
        out = self._grads(X, idx)
        return out[0] if single else out

    def hvps_at(self, X, idx, V) -> np.ndarray:
        """Per-sample Hessian-vector products H_{idx}(X) @ V.

        ``V`` is either one vector per point, shape (R, d), or one per
        selected sample, shape (R, B, d).
        """
        X, idx, single = self._stack(X, idx)
        V = np.asarray(V, dtype=np.float64)
        if single:
            V = V[None]
        if V.ndim == 2:
            V = np.broadcast_to(V[:, None, :], idx.shape + (self.dim,))
        if V.shape != idx.shape + (self.dim,):
            raise ContractError(f"direction array has shape {V.shape}, expected {idx.shape + (self.dim,)}")
        out = self._hvps(X, idx, V)
        return out[0] if single else out

    def mean_grad(self, X) -> np.ndarray:
        """Full gradient at each row of X."""
        return self.grads_at(X).mean(axis=-2)

    # -- single point conveniences -----------------------------------------
    def losses(self, x) -> np.ndarray:
        return self.losses_at(as_point(x, self.dim))

    def grads(self, x) -> np.ndarray:
        return self.grads_at(as_point(x, self.dim))

    def hessian(self, x) -> np.ndarray:
        """Full-batch Hessian assembled from HVPs against the unit basis."""
        x = as_point(x, self.dim)
        cols = [self.hvps_at(x, None, e).mean(axis=0) for e in np.eye(self.dim)]
        H = np.stack(cols, axis=1)
        return 0.5 * (H + H.T)

    # -- subclass hooks ----------------------------------------------------
    def _losses(self, X, idx):
        raise NotImplementedError

    def _grads(self, X, idx):
        raise NotImplementedError

    def _hvps(self, X, idx, V):
        raise NotImplementedError


class ShiftedQuadratic(ObjectiveEnsemble):
    """f_i(x) = 1/2 (x - b_i)^T A (x - b_i) with a shared PSD matrix A.

    The gradient noise A(b_bar - b_i) does not depend on x, so V is constant.
    """

    family = "shifted_quadratic"

    def __init__(self, centers, matrix=None, params=None):
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        n, d = centers.shape
        A = np.eye(d) if matrix is None else np.asarray(matrix, dtype=np.float64)
        if A.shape != (d, d) or not np.allclose(A, A.T):
            raise ConfigError("matrix must be symmetric d x d")
        if np.linalg.eigvalsh(A).min() < -1e-12:
            raise ConfigError("matrix must be positive semidefinite")
        if params is None:
            params = {"centers": centers.tolist(), "matrix": A.tolist()}
        super().__init__(n, d, params)
        self.centers = centers
        self.A = A
        self._center_mean = centers.mean(axis=0)
        self.centers.setflags(write=False)
        self.A.setflags(write=False)

    @classmethod
    def generate(cls, n: int, d: int, seed: int, noise: float = 1.0, eigs=None, offset: float = 0.0):
        rng = generator(seed, "shifted_quadratic")
        eigs = np.ones(d) if eigs is None else np.asarray(eigs, dtype=np.float64)
        if eigs.shape != (d,):
            raise ConfigError("eigs must have length d")
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        A = (Q * eigs) @ Q.T
        A = 0.5 * (A + A.T)
        centers = offset + noise * rng.standard_normal((n, d))
        params = {"n": n, "d": d, "seed": seed, "noise": noise, "eigs": eigs.tolist(), "offset": offset}
        return cls(centers, A, params)

    def _losses(self, X, idx):
        D = X[:, None, :] - self.centers[idx]
        return 0.5 * np.einsum("rbi,ij,rbj->rb", D, self.A, D)

    def _grads(self, X, idx):
        return (X[:, None, :] - self.centers[idx]) @ self.A

    def _hvps(self, X, idx, V):
        return V @ self.A

    def mean_grad(self, X):
        X = np.asarray(X, dtype=np.float64)
        return (X - self._center_mean) @ self.A


class HeteroscedasticQuadratic(ObjectiveEnsemble):
    """f_i(x) = 1/2 a_i ||x||^2, so grad f_i = a_i x and V(x) = Var(a) x x^T."""

    family = "heteroscedastic_quadratic"

    def __init__(self, curvatures, dim: int = 1, repeat: int = 1, params=None):
        base = np.asarray(curvatures, dtype=np.float64).ravel()
        if base.size == 0 or np.any(base <= 0):
            raise ConfigError("curvatures must be non-empty and positive")
        if repeat < 1:
            raise ConfigError("repeat must be >= 1")
        a = np.tile(base, int(repeat))
        if params is None:
            params = {"curvatures": base.tolist(), "d": int(dim), "repeat": int(repeat)}
        super().__init__(a.size, dim, params)
        self.a = a
        self.a.setflags(write=False)
        self._a_mean = a.mean()

    @classmethod
    def generate(cls, n: int, seed: int, mean: float = 2.0, spread: float = 1.0, d: int = 1):
        if spread >= mean:
            raise ConfigError("spread must be smaller than mean to keep curvatures positive")
        rng = generator(seed, "heteroscedastic_quadratic")
        a = rng.uniform(mean - spread, mean + spread, size=n)
        params = {"n": n, "seed": seed, "mean": mean, "spread": spread, "d": d}
        return cls(a, dim=d, params=params)

    def init_point(self):
        return np.ones(self.dim)

    def _losses(self, X, idx):
        return 0.5 * self.a[idx] * np.sum(X * X, axis=1)[:, None]

    def _grads(self, X, idx):
        return self.a[idx][..., None] * X[:, None, :]

    def _hvps(self, X, idx, V):
        return self.a[idx][..., None] * V

    def mean_grad(self, X):
        return self._a_mean * np.asarray(X, dtype=np.float64)


class Linear(ObjectiveEnsemble):
    """f_i(x) = v_i . x: constant gradients, zero curvature.

    Finite differences of a linear loss are exact up to rounding, which makes
    this the reference case for derivative-free norm estimates.
    """

    family = "linear"

    def __init__(self, slopes, params=None):
        V = np.atleast_2d(np.asarray(slopes, dtype=np.float64))
        if not np.all(np.isfinite(V)):
            raise ConfigError("slopes must be finite")
        if params is None:
            params = {"slopes": V.tolist()}
        super().__init__(V.shape[0], V.shape[1], params)
        self.slopes = V
        self.slopes.setflags(write=False)

    @classmethod
    def generate(cls, n: int, d: int, seed: int, scale: float = 1.0):
        V = scale * generator(seed, "linear").standard_normal((n, d))
        return cls(V, {"n": n, "d": d, "seed": seed, "scale": scale})

    def _losses(self, X, idx):
        return np.einsum("rbi,ri->rb", self.slopes[idx], X)

    def _grads(self, X, idx):
        return np.broadcast_to(self.slopes[idx], idx.shape + (self.dim,)).copy()

    def _hvps(self, X, idx, V):
        return np.zeros_like(V)


class TwoBasin(ObjectiveEnsemble):
    """Sharp and flat Gaussian wells plus a weak confining quadratic.

    f_i(x) = phi(x - c_i) where the c_i are zero-mean jitter vectors, so the
    gradient noise at a minimum scales with the local curvature: the sharp
    well carries far more noise than the flat one.
    """

    family = "two_basin"
    DEFAULTS = {
        "n": 64, "d": 1, "seed": 0, "jitter": 0.2,
        "sharp_depth": 1.0, "sharp_width": 0.25, "sharp_center": -1.0,
        "flat_depth": 1.0, "flat_width": 0.7, "flat_center": 1.0,
        "confine": 0.05,
    }

    def __init__(self, **overrides):
        unknown = set(overrides) - set(self.DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown two_basin parameters: {sorted(unknown)}")
        p = {**self.DEFAULTS, **overrides}
        super().__init__(int(p["n"]), int(p["d"]), p)
        d = self.dim
        rng = generator(int(p["seed"]), "two_basin")
        c = float(p["jitter"]) * rng.standard_normal((self.n, d))
        if self.n > 1:
            c -= c.mean(axis=0)
        self.jitter = c
        e0 = np.zeros(d)
        e0[0] = 1.0
        self.wells = (
            (float(p["sharp_depth"]), float(p["sharp_width"]), float(p["sharp_center"]) * e0),
            (float(p["flat_depth"]), float(p["flat_width"]), float(p["flat_center"]) * e0),
        )
        self.confine = float(p["confine"])
        self.jitter.setflags(write=False)
        self._locate_minima()

    def _locate_minima(self):
        from samlab.stochastic import grad_stats

        found = []
        for _, _, mu in self.wells:
            res = optimize.minimize(
                lambda z: self.losses_at(z).mean(),
                mu,
                jac=lambda z: self.grads_at(z).mean(axis=0),
                method="BFGS",
                options={"gtol": 1e-12},
            )
            found.append(res.x)
        self.sharp_min, self.flat_min = found
        if np.linalg.norm(self.sharp_min - self.flat_min) < 1e-6:
            raise ConfigError("two_basin parameters produce a single basin")
        axis = self.flat_min - self.sharp_min
        ts = np.linspace(0.0, 1.0, 2001)
        vals = np.array([self.losses_at(self.sharp_min + t * axis).mean() for t in ts])
        k = int(np.argmax(vals))
        if k in (0, len(ts) - 1):
            raise ConfigError("two_basin parameters produce no barrier between the wells")
        self.barrier = self.sharp_min + ts[k] * axis
        self._axis = axis / np.linalg.norm(axis)
        self.trace_sharp = grad_stats(self, self.sharp_min).trace
        self.trace_flat = grad_stats(self, self.flat_min).trace
        if self.n > 1 and self.trace_sharp < 4.0 * self.trace_flat:
            raise ConfigError(
                f"tr V at the sharp minimum ({self.trace_sharp:.3g}) is not >= 4x the flat one ({self.trace_flat:.3g})"
            )

    def init_point(self):
        return self.sharp_min.copy()

    def in_flat_basin(self, X) -> np.ndarray:
        """Region test: projection past the barrier toward the flat minimum."""
        X = np.asarray(X, dtype=np.float64)
        return (X - self.barrier) @ self._axis > 0.0

    def _terms(self, X, idx):
        Y = X[:, None, :] - self.jitter[idx]
        for h, w, mu in self.wells:
            D = Y - mu
            e = np.exp(-np.sum(D * D, axis=-1) / (2.0 * w * w))
            yield Y, D, h, w, e

    def _losses(self, X, idx):
        Y = X[:, None, :] - self.jitter[idx]
        out = 0.5 * self.confine * np.sum(Y * Y, axis=-1)
        for _, _, h, _, e in self._terms(X, idx):
            out = out - h * e
        return out

    def _grads(self, X, idx):
        out = None
        for Y, D, h, w, e in self._terms(X, idx):
            if out is None:
                out = self.confine * Y
            out = out + (h / (w * w)) * e[..., None] * D
        return out

    def _hvps(self, X, idx, V):
        out = self.confine * V
        for _, D, h, w, e in self._terms(X, idx):
            dv = np.sum(D * V, axis=-1, keepdims=True)
            out = out + (h / (w * w)) * e[..., None] * (V - D * dv / (w * w))
        return out


class TinyMLP(ObjectiveEnsemble):
    """Two-layer tanh regression, f_i = 1/2 (net(u_i) - y_i)^2.

    Parameters are packed as [W1 (hidden x inputs), b1, w2, b2]. Gradients and
    Hessian-vector products are hand-derived backprop, no autodiff.
    """

    family = "tiny_mlp"
    DEFAULTS = {"n": 32, "inputs": 2, "hidden": 8, "seed": 0, "label_noise": 0.1, "init_scale": 0.5, "duplicate": False}

    def __init__(self, **overrides):
        unknown = set(overrides) - set(self.DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown tiny_mlp parameters: {sorted(unknown)}")
        p = {**self.DEFAULTS, **overrides}
        n_in, hid = int(p["inputs"]), int(p["hidden"])
        super().__init__(int(p["n"]), hid * n_in + 2 * hid + 1, p)
        self.n_in, self.hid = n_in, hid
        rng = generator(int(p["seed"]), "tiny_mlp")
        U = rng.uniform(-1.0, 1.0, size=(self.n, n_in))
        if p["duplicate"]:
            U[:] = U[0]
        target = np.sin(np.pi * U[:, 0]) * np.cos(0.5 * np.pi * U[:, -1])
        y = target + float(p["label_noise"]) * rng.standard_normal(self.n)
        if p["duplicate"]:
            y[:] = y[0]
        self.U, self.y = U, y
        self._x0 = float(p["init_scale"]) * rng.standard_normal(self.dim)
        self.U.setflags(write=False)
        self.y.setflags(write=False)

    def init_point(self):
        return self._x0.copy()

    def _unpack(self, x):
        k = self.hid * self.n_in
        W1 = x[:k].reshape(self.hid, self.n_in)
        b1 = x[k:k + self.hid]
        w2 = x[k + self.hid:k + 2 * self.hid]
        return W1, b1, w2, x[-1]

    def _forward(self, x, rows):
        W1, b1, w2, b2 = self._unpack(x)
        U = self.U[rows]
        h = np.tanh(U @ W1.T + b1)
        out = h @ w2 + b2
        return U, h, w2, out - self.y[rows]

    def _out_grad(self, U, h, w2):
        hp = 1.0 - h * h
        gw = hp * w2
        gW1 = gw[:, :, None] * U[:, None, :]
        B = U.shape[0]
        return np.concatenate([gW1.reshape(B, -1), gw, h, np.ones((B, 1))], axis=1)

    def _losses(self, X, idx):
        out = np.empty(idx.shape)
        for r in range(X.shape[0]):
            out[r] = 0.5 * self._forward(X[r], idx[r])[3] ** 2
        return out

    def _grads(self, X, idx):
        out = np.empty(idx.shape + (self.dim,))
        for r in range(X.shape[0]):
            U, h, w2, res = self._forward(X[r], idx[r])
            out[r] = res[:, None] * self._out_grad(U, h, w2)
        return out

    def _hvps(self, X, idx, V):
        out = np.empty(idx.shape + (self.dim,))
        k = self.hid * self.n_in
        for r in range(X.shape[0]):
            U, h, w2, res = self._forward(X[r], idx[r])
            J = self._out_grad(U, h, w2)
            v = V[r]
            vW1 = v[:, :k].reshape(-1, self.hid, self.n_in)
            vb1 = v[:, k:k + self.hid]
            vw2 = v[:, k + self.hid:k + 2 * self.hid]
            hp = 1.0 - h * h
            hpp = -2.0 * h * hp
            da = np.einsum("bjk,bk->bj", vW1, U) + vb1
            # directional derivative of the output gradient along v
            d_ga = vw2 * hp + w2 * hpp * da
            dJ = np.concatenate(
                [(d_ga[:, :, None] * U[:, None, :]).reshape(U.shape[0], -1), d_ga, hp * da, np.zeros((U.shape[0], 1))],
                axis=1,
            )
            jv = np.sum(J * v, axis=1)
            out[r] = jv[:, None] * J + res[:, None] * dJ
        return out


def make_ensemble(family: str, **params) -> ObjectiveEnsemble:
    """Build an ensemble from a family name and generation parameters."""
    if family == "shifted_quadratic":
        if "centers" in params:
            return ShiftedQuadratic(params["centers"], params.get("matrix"))
        return ShiftedQuadratic.generate(
            int(params["n"]), int(params.get("d", 1)), int(params.get("seed", 0)),
            noise=float(params.get("noise", 1.0)), eigs=params.get("eigs"), offset=float(params.get("offset", 0.0)),
        )
    if family == "heteroscedastic_quadratic":
        if "curvatures" in params:
            return HeteroscedasticQuadratic(params["curvatures"], dim=int(params.get("d", 1)), repeat=int(params.get("repeat", 1)))
        return HeteroscedasticQuadratic.generate(
            int(params["n"]), int(params.get("seed", 0)), mean=float(params.get("mean", 2.0)),
            spread=float(params.get("spread", 1.0)), d=int(params.get("d", 1)),
        )
    if family == "linear":
        if "slopes" in params:
            return Linear(params["slopes"])
        return Linear.generate(int(params["n"]), int(params.get("d", 1)), int(params.get("seed", 0)), float(params.get("scale", 1.0)))
    if family == "two_basin":
        return TwoBasin(**params)
    if family == "tiny_mlp":
        return TinyMLP(**params)
    raise ConfigError(f"unknown ensemble family {family!r}; expected one of {FAMILIES + HELPER_FAMILIES}")


def from_descriptor(text: str) -> ObjectiveEnsemble:
    obj = json.loads(text)
    if not isinstance(obj, dict) or "family" not in obj:
        raise ConfigError("descriptor must be a JSON object with a 'family' key")
    family = obj.pop("family")
    return make_ensemble(family, **obj)


# -- operation-level API ------------------------------------------------------

def full_loss(ens: ObjectiveEnsemble, x) -> float:
    return float(ens.losses_at(as_point(x, ens.dim)).mean())


def full_grad(ens: ObjectiveEnsemble, x) -> np.ndarray:
    return ens.grads_at(as_point(x, ens.dim)).mean(axis=0)


def _check_index(ens, i):
    if not 0 <= int(i) < ens.n:
        raise ContractError(f"sample index {i} out of range [0, {ens.n})")
    return np.array([int(i)])


def sample_loss(ens: ObjectiveEnsemble, i: int, x) -> float:
    return float(ens.losses_at(as_point(x, ens.dim), _check_index(ens, i))[0])


def sample_grad(ens: ObjectiveEnsemble, i: int, x) -> np.ndarray:
    return ens.grads_at(as_point(x, ens.dim), _check_index(ens, i))[0]


def sample_hvp(ens: ObjectiveEnsemble, i: int, x, v) -> np.ndarray:
    return ens.hvps_at(as_point(x, ens.dim), _check_index(ens, i), as_point(v, ens.dim))[0]
