"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are also repeated
in the terminal summary.
"""

import math
import os
import time

import numpy as np
import pytest

from samlab.config import load_config
from samlab.experiments import estimator_checks, run
from samlab.objectives import make_ensemble
from samlab.optimizers import OptimizerConfig, Variant, gibbs_weights, simulate
from samlab.sde import SDE_VARIANTS, SDEModel, diffusion_factor
from samlab.verify import moment_scaling

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
RESULTS = []


def report(number, title, passed, detail, elapsed, limit):
    in_time = elapsed <= limit
    line = f"criterion {number} [{'PASS' if passed and in_time else 'FAIL'}] {title}: {detail} ({elapsed:.1f}s, limit {limit:g}s)"
    RESULTS.append(line)
    print(line)
    return passed and in_time


def _cfg(name):
    return load_config(os.path.join(CONFIGS, f"{name}.cfg"))


# -- criterion 1 --------------------------------------------------------------

NOISY = {
    "shifted_quadratic": dict(n=16, d=3, seed=1),
    "heteroscedastic_quadratic": dict(n=16, seed=2),
    "two_basin": dict(),
    "tiny_mlp": dict(n=16, hidden=4),
}
QUIET = {
    "shifted_quadratic": dict(n=16, d=3, seed=1, noise=0.0),
    "heteroscedastic_quadratic": dict(curvatures=[2.0] * 16),
    "two_basin": dict(n=16, jitter=0.0),
    "tiny_mlp": dict(n=16, hidden=4, duplicate=True),
}


def _traj(ens, cfg, seed):
    return simulate(ens, ens.init_point() + 0.25, cfg, 20, seed)


def test_criterion_1_collapse_identities():
    t0 = time.perf_counter()
    failures = []
    B, m = 4, 2
    for fam in NOISY:
        noisy = make_ensemble(fam, **NOISY[fam])
        quiet = make_ensemble(fam, **QUIET[fam])
        for seed in range(5):
            base = _traj(noisy, OptimizerConfig("sgd", eta=0.05, batch_size=B), seed)
            for v in Variant:
                if v is Variant.SGD:
                    continue
                cfg = OptimizerConfig(v, eta=0.05, rho=0.0, batch_size=B, micro_size=m, delta=1e-3)
                if not np.array_equal(base, _traj(noisy, cfg, seed)):
                    failures.append(f"{fam}/{v.value} rho=0 seed {seed}")
            for group in (
                (Variant.MINIBATCH_SAM, Variant.N_SAM, Variant.M_SAM),
                (Variant.MINIBATCH_USAM, Variant.N_USAM, Variant.M_USAM),
            ):
                runs = [_traj(quiet, OptimizerConfig(v, eta=0.05, rho=0.05, batch_size=B, micro_size=m), seed) for v in group]
                if not all(np.array_equal(runs[0], r) for r in runs[1:]):
                    failures.append(f"{fam}/{group[0].value} zero-noise seed {seed}")
            for mb, mv in ((Variant.MINIBATCH_SAM, Variant.M_SAM), (Variant.MINIBATCH_USAM, Variant.M_USAM)):
                a = _traj(noisy, OptimizerConfig(mb, eta=0.05, rho=0.05, batch_size=B), seed)
                b = _traj(noisy, OptimizerConfig(mv, eta=0.05, rho=0.05, batch_size=B, micro_size=B), seed)
                if not np.array_equal(a, b):
                    failures.append(f"{fam}/{mv.value} m=|gamma| seed {seed}")
    ok = report(1, "collapse identities bit-identical", not failures,
                f"{len(failures)} mismatches" + (f" e.g. {failures[0]}" if failures else ""), time.perf_counter() - t0, 10)
    assert ok, failures


# -- criterion 2 --------------------------------------------------------------

def test_criterion_2_drift_verification():
    t0 = time.perf_counter()
    res = run(_cfg("verify-drift"))
    bad = [c.name for c in res.checks if not c.passed]
    usam = res.results["minibatch_usam@2"]["coarse"]
    hand = -2.45
    # finite population n = 1000 moves the closed form by about 1e-3 away from the independent-draw hand value
    hand_ok = abs(usam["empirical_first_moment"][0] - hand) <= 3 * usam["first_moment_se"][0] + 2e-3
    # a non-quadratic problem where the expansion is not exact, so the shrink factor is exercised
    tb = make_ensemble("two_basin")
    shrink = [
        moment_scaling(tb, [-0.9], OptimizerConfig(v, eta=0.1, rho=0.1, batch_size=2), replicates=100_000)
        for v in ("minibatch_usam", "minibatch_sam")
    ]
    shrink_ok = all(s.passed and not s.exact_expansion for s in shrink)
    passed = not bad and hand_ok and shrink_ok
    detail = (f"{len(res.checks) - len(bad)}/{len(res.checks)} drift checks; minibatch_usam k=2 mean "
              f"{usam['empirical_first_moment'][0]:.4f} vs hand {hand}; two_basin shrink ratios "
              + ", ".join(f"{s.ratio:.2f}" for s in shrink))
    assert report(2, "one-step drift matches the continuous model", passed, detail, time.perf_counter() - t0, 120), bad


# -- criterion 3 --------------------------------------------------------------

def test_criterion_3_weak_order():
    t0 = time.perf_counter()
    res = run(_cfg("verify-weak-order"))
    slopes = {
        f"{v}/{g}": fit["slope"]
        for v, rep in res.results["reports"].items()
        for g, fit in rep["eta_slopes"].items()
    }
    n_inc = res.results["inconclusive_cells"]
    passed = res.status == "pass" and n_inc <= 1
    detail = ", ".join(f"{k} {s:.3f}" for k, s in sorted(slopes.items())) + f"; inconclusive cells {n_inc}"
    assert report(3, "weak error eta-slope in [0.7, 1.3]", passed, detail, time.perf_counter() - t0, 600)


# -- criterion 4 --------------------------------------------------------------

def test_criterion_4_norm_sandwich():
    t0 = time.perf_counter()
    res = run(_cfg("verify-prop1"))
    detail = "; ".join(f"{c.name}: {'ok' if c.passed else c.detail}" for c in res.checks)
    assert report(4, "norm sandwich and monotonicity in k", res.status == "pass", detail, time.perf_counter() - t0, 60)


# -- criterion 5 --------------------------------------------------------------

def test_criterion_5_gibbs_weights():
    t0 = time.perf_counter()
    uniform = np.array_equal(gibbs_weights([1.0, 2.0], 0.0).weights, [0.5, 0.5])
    w = gibbs_weights([1.0, 2.0], 1.0, normalization="none").weights
    two_point = abs(w[0] - 0.2689) <= 1e-4 and abs(w[1] - 0.7311) <= 1e-4
    scores = [0.3, 1.7, -0.4, 2.2, 0.9]
    ents = [gibbs_weights(scores, lam).entropy for lam in (0.25, 0.5, 1.0, 2.0)]
    mono = all(b <= a for a, b in zip(ents, ents[1:]))
    detail = f"uniform {uniform}; w = ({w[0]:.4f}, {w[1]:.4f}); entropies " + ", ".join(f"{e:.4f}" for e in ents)
    assert report(5, "Gibbs weights", uniform and two_point and mono, detail, time.perf_counter() - t0, 1)


# -- criterion 6 --------------------------------------------------------------

def test_criterion_6_norm_estimator():
    t0 = time.perf_counter()
    rows = {name: (value, passed) for name, value, _, _, passed in estimator_checks()}
    wanted = ["linear_exhaustive_exact", "quadratic_bias_slope", "rademacher_fourth_moment", "gaussian_fourth_moment"]
    passed = all(rows[n][1] for n in wanted)
    detail = "; ".join(f"{n} {rows[n][0]:.6g} {'ok' if rows[n][1] else 'OUT OF RANGE'}" for n in wanted)
    detail += f"; per-probe remainder slope {rows['quadratic_probe_remainder_slope'][0]:.3f}"
    assert report(6, "finite-difference norm estimator", passed, detail, time.perf_counter() - t0, 60)


# -- criterion 7 --------------------------------------------------------------

def test_criterion_7_mechanism_orderings():
    t0 = time.perf_counter()
    results = {name: run(_cfg(name)) for name in ("trace", "msweep", "escape")}
    lines = []
    for name, res in results.items():
        for c in res.checks:
            lines.append(f"{name}: {c.name} {'ok' if c.passed else 'violated (' + c.detail + ')'}")
    tr = results["trace"].results["runs"]
    ms = results["msweep"].results["runs"]
    medians = "trace medians " + ", ".join(f"{k} {v['median_final_trace_V']:.4f}" for k, v in tr.items())
    medians += "; msweep escape medians " + ", ".join(f"{k} {v.get('median_escape_step')}" for k, v in ms.items())
    passed = all(r.status == "pass" for r in results.values())
    assert report(7, "mechanism orderings", passed, "; ".join(lines) + "; " + medians, time.perf_counter() - t0, 900)


# -- criterion 8 --------------------------------------------------------------

SDE_PROBLEMS = {
    "heteroscedastic_quadratic": (dict(curvatures=[1.0, 3.0], repeat=500), [[1.0], [0.5], [-2.0], [0.1]]),
    "shifted_quadratic": (dict(n=16, d=3, seed=0), None),
    "two_basin": (dict(), [[-0.95], [-0.7], [0.0], [0.9]]),
}


def test_criterion_8_diffusion_factor():
    t0 = time.perf_counter()
    worst_rec, worst_clamp = 0.0, 0.0
    for fam, (params, pts) in SDE_PROBLEMS.items():
        ens = make_ensemble(fam, **params)
        X = np.asarray(pts, float) if pts else ens.init_point() + 0.5 * np.random.default_rng(0).standard_normal((4, ens.dim))
        for v in SDE_VARIANTS:
            for rho in (0.01, 0.05, 0.1):
                df = diffusion_factor(ens, X, rho, v, 2 if v.uses_micro else 4, scale=0.05)
                C = 0.5 * (df.covariance + np.swapaxes(df.covariance, -1, -2))
                w, U = np.linalg.eigh(C)
                clamped = (U * np.maximum(w, 0.0)[..., None, :]) @ np.swapaxes(U, -1, -2)
                fro = np.linalg.norm(C, axis=(-2, -1))
                SS = df.factor @ np.swapaxes(df.factor, -1, -2)
                rec = np.linalg.norm(SS - clamped, axis=(-2, -1)) / np.where(fro > 0, fro, 1.0)
                worst_rec = max(worst_rec, float(rec.max()))
                worst_clamp = max(worst_clamp, float(df.clamp_ratio.max()))
    # Sigma00-only: m-variant covariance = (m eta/|gamma|) V/m; the scale itself is linear in m/|gamma|
    hq = make_ensemble("heteroscedastic_quadratic", curvatures=[1.0, 3.0], repeat=500)
    B, eta = 8, 0.1
    scales = [SDEModel(hq, "m_sam", eta, 0.1, B, m, order="sigma00_only").scale for m in (1, 2, 4, 8)]
    scale_ok = all(math.isclose(s, m * eta / B, rel_tol=0, abs_tol=1e-15) for s, m in zip(scales, (1, 2, 4, 8)))
    covs = []
    for m in (1, 2, 4, 8):
        model = SDEModel(hq, "m_sam", eta, 0.1, B, m, order="sigma00_only")
        _, S = model.coefficients(np.array([[1.0]]))
        covs.append(float(S[0, 0, 0] ** 2))
    V = float(np.var(hq.grads(np.array([1.0]))[:, 0]))
    cov_ok = all(math.isclose(c, eta * V / B, rel_tol=1e-12) for c in covs)
    passed = worst_rec <= 1e-8 and worst_clamp <= 1e-6 and scale_ok and cov_ok
    detail = (f"max reconstruction error {worst_rec:.2e}, max clamp {worst_clamp:.2e} x ||Sigma||_F, "
              f"scales {scales}, m-variant noise eta V/|gamma| for all m: {cov_ok}")
    assert report(8, "diffusion factor", passed, detail, time.perf_counter() - t0, 60)
