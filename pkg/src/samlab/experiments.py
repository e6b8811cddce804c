"""Reproducible experiments behind the ``samlab`` subcommands.

Each ``run_*`` takes a :class:`RunConfig` and returns an
:class:`ExperimentResult`: a status, the data files to write (name -> text)
and a JSON summary that embeds the resolved config and every seed used.
Wall-clock measurements go to a separate sidecar so the data files are
byte-identical across reruns.
"""

from __future__ import annotations

import io
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from samlab.config import RunConfig
from samlab.errors import ConfigError
from samlab.objectives import ObjectiveEnsemble, TwoBasin, make_ensemble
from samlab.optimizers import (
    OptimizerConfig, Variant, all_sign_vectors, fd_norm_estimate, gibbs_weights, simulate,
)
from samlab.rng import generator
from samlab.stochastic import check_norm_bounds, grad_stats
from samlab.verify import moment_scaling, one_step_moments, weak_error_grid

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"
EXIT_CODES = {PASS: 0, FAIL: 1, INCONCLUSIVE: 3}

RECORD_COLUMNS = ("step", "loss", "grad_norm", "trace_V", "guarded_count")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ExperimentResult:
    experiment: str
    config: dict
    checks: list = field(default_factory=list)
    files: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    sidecar: dict = field(default_factory=dict)
    inconclusive: bool = False

    @property
    def status(self) -> str:
        if self.inconclusive:
            return INCONCLUSIVE
        return PASS if all(c.passed for c in self.checks) else FAIL

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.status]

    def summary(self) -> dict:
        return {
            "experiment": self.experiment,
            "status": self.status,
            "config": self.config,
            "seeds": self.config.get("seeds", []),
            "checks": [asdict(c) for c in self.checks],
            "results": self.results,
        }

    def summary_json(self) -> str:
        return json.dumps(_jsonable(self.summary()), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _cell(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


# -- shared helpers ---------------------------------------------------------

DEFAULT_ENSEMBLES = {
    "heteroscedastic_quadratic": {"curvatures": [1.0, 3.0], "repeat": 500},
    "shifted_quadratic": {"n": 4, "d": 3, "seed": 0},
    "linear": {"n": 4, "d": 4, "seed": 0},
    "two_basin": {"flat_width": 1.0, "sharp_depth": 0.35, "sharp_width": 0.15},
    "tiny_mlp": {},
}


def build_ensemble(cfg: RunConfig) -> ObjectiveEnsemble:
    defaults = DEFAULT_ENSEMBLES.get(cfg.family, {})
    if cfg.family in ("two_basin", "tiny_mlp"):
        # keyword families: config entries override single defaults
        params = {**defaults, **cfg.ensemble}
    else:
        params = cfg.ensemble or defaults
    try:
        return make_ensemble(cfg.family, **params)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad ensemble parameters for {cfg.family}: {exc}") from None


def _point(ens, value):
    return ens.init_point() if value is None else np.asarray(value, dtype=np.float64)


def parse_run_spec(spec: str):
    """``variant`` or ``variant@m`` (micro-batch size for the m-variants)."""
    name, _, micro = spec.partition("@")
    try:
        variant = Variant(name)
    except ValueError:
        raise ConfigError(f"unknown variant {name!r}") from None
    m = None
    if micro:
        if not variant.uses_micro:
            raise ConfigError(f"{spec!r}: only m-variants take a micro size")
        try:
            m = int(micro)
        except ValueError:
            raise ConfigError(f"{spec!r}: micro size must be an integer") from None
    return variant, m


def _train_config(cfg: RunConfig, variant, micro=None) -> OptimizerConfig:
    rho = 0.0 if variant is Variant.SGD else cfg["rho"]
    kw = dict(eta=cfg["eta"], rho=rho, batch_size=cfg["batch_size"], micro_size=micro)
    if variant is Variant.REWEIGHTED_SAM:
        kw.update(lam=cfg["lambda"], delta=cfg["delta"], q_probes=cfg["q_probes"])
    return OptimizerConfig(variant, **kw)


@dataclass
class RunRecord:
    label: str
    seed: int
    rows: list
    wall_ns: list
    escape_step: int | None
    final_loss: float
    final_trace: float


def train(ens, opt: OptimizerConfig, x0, steps: int, seed: int, record_every: int, label: str, track_escape: bool) -> RunRecord:
    """One trajectory with per-step diagnostics every ``record_every`` steps."""
    if record_every < 1:
        raise ConfigError("record_every must be >= 1")
    rows, walls = [], []
    escape = [None]
    t0 = time.monotonic_ns()

    def observe(k, X, guarded):
        x = X[0]
        if track_escape and escape[0] is None and bool(ens.in_flat_basin(X)[0]):
            escape[0] = k
        if k % record_every == 0 or k == steps:
            st = grad_stats(ens, x)
            loss = float(ens.losses(x).mean())
            gcount = 0 if guarded is None else int(guarded[0])
            rows.append((k, loss, float(np.linalg.norm(st.mean_grad)), st.trace, gcount))
            walls.append((k, time.monotonic_ns() - t0))

    simulate(ens, x0, opt, steps, seed, 1, callback=observe)
    return RunRecord(label, seed, rows, walls, escape[0], rows[-1][1], rows[-1][3])


def _median_se(values):
    a = np.asarray(values, dtype=np.float64)
    if a.size < 2:
        return float(np.median(a)), 0.0
    return float(np.median(a)), float(1.2533 * a.std(ddof=1) / math.sqrt(a.size))


def ordered_non_increasing(labels, medians, ses, n_se, strict) -> Check:
    """medians[i+1] <= medians[i] (+ n_se combined SE unless strict)."""
    bad = []
    for i in range(len(medians) - 1):
        a, b = medians[i], medians[i + 1]
        slack = 0.0 if strict else n_se * math.hypot(ses[i], ses[i + 1])
        ok = b < a if strict else b <= a + slack
        if not ok:
            bad.append(f"{labels[i + 1]} ({b:.6g}) > {labels[i]} ({a:.6g}) + {slack:.3g}")
    return bad


def _run_many(cfg, ens, specs, track_escape):
    """Train every (run spec, seed) pair; returns records grouped by label."""
    x0 = _point(ens, cfg["x0"])
    out = {}
    for label, variant, micro in specs:
        opt = _train_config(cfg, variant, micro)
        out[label] = [train(ens, opt, x0, cfg["steps"], s, cfg["record_every"], label, track_escape) for s in cfg.seeds]
    return out


def _record_files(result, records, name, track_escape):
    rows, final, walls = [], [], []
    for label, recs in records.items():
        for r in recs:
            rows += [(label, r.seed, *row) for row in r.rows]
            final.append((label, r.seed, r.final_loss, r.final_trace) + ((r.escape_step,) if track_escape else ()))
            walls += [(label, r.seed, k, ns) for k, ns in r.wall_ns]
    result.files[f"{name}_steps.csv"] = to_csv(("run", "seed") + RECORD_COLUMNS, rows)
    head = ("run", "seed", "final_loss", "final_trace_V") + (("escape_step",) if track_escape else ())
    result.files[f"{name}_final.csv"] = to_csv(head, final)
    result.sidecar[f"{name}_wall.csv"] = to_csv(("run", "seed", "step", "wall_ns"), walls)


def _escape_value(r: RunRecord, budget: int) -> float:
    """Censored escape step: runs that never escape count as budget + 1."""
    return float(budget + 1 if r.escape_step is None else r.escape_step)


def _summaries(records, budget, track_escape):
    out = {}
    for label, recs in records.items():
        tr_med, tr_se = _median_se([r.final_trace for r in recs])
        entry = {
            "median_final_trace_V": tr_med, "final_trace_V_se": tr_se,
            "median_final_loss": _median_se([r.final_loss for r in recs])[0],
        }
        if track_escape:
            esc = [_escape_value(r, budget) for r in recs]
            med, se = _median_se(esc)
            entry.update({
                "median_escape_step": med if med <= budget else None, "escape_step_se": se,
                "escaped": sum(r.escape_step is not None for r in recs), "runs": len(recs),
                "_median_escape_censored": med,
            })
        out[label] = entry
    return out


# -- experiments ------------------------------------------------------------

def run_msweep(cfg: RunConfig) -> ExperimentResult:
    ens = build_ensemble(cfg)
    variant = Variant(cfg["variant"])
    if not variant.uses_micro:
        raise ConfigError("msweep needs an m-variant (m_sam or m_usam)")
    B = cfg["batch_size"]
    ms = sorted(set(cfg["m_list"]), reverse=True)
    for m in ms:
        if m < 1 or B % m:
            raise ConfigError(f"m={m} does not divide |gamma|={B}")
    track = isinstance(ens, TwoBasin)
    specs = [(f"{variant.value}@{m}", variant, m) for m in ms]
    records = _run_many(cfg, ens, specs, track)
    res = ExperimentResult("msweep", cfg.resolved())
    _record_files(res, records, "msweep", track)
    summ = _summaries(records, cfg["steps"], track)
    labels = [s[0] for s in specs]
    meds = [summ[l]["median_final_trace_V"] for l in labels]
    ses = [summ[l]["final_trace_V_se"] for l in labels]
    bad = ordered_non_increasing(labels, meds, ses, cfg["n_se"], cfg["strict"])
    res.checks.append(Check("median final trace_V non-increasing as m decreases", not bad, "; ".join(bad)))
    if track:
        meds = [summ[l]["_median_escape_censored"] for l in labels]
        ses = [summ[l]["escape_step_se"] for l in labels]
        bad = ordered_non_increasing(labels, meds, ses, cfg["n_se"], cfg["strict"])
        res.checks.append(Check("median escape step non-increasing as m decreases", not bad, "; ".join(bad)))
    res.files["msweep_summary.csv"] = to_csv(
        ("m", "median_final_loss", "median_final_trace_V", "median_escape_step"),
        [(m, summ[l]["median_final_loss"], summ[l]["median_final_trace_V"], summ[l].get("median_escape_step")) for m, l in zip(ms, labels)],
    )
    res.results = {"runs": {l: {k: v for k, v in e.items() if not k.startswith("_")} for l, e in summ.items()}}
    return res


def run_escape(cfg: RunConfig) -> ExperimentResult:
    ens = build_ensemble(cfg)
    if not isinstance(ens, TwoBasin):
        raise ConfigError("escape runs need the two_basin family")
    specs = []
    for spec in cfg["runs"]:
        v, m = parse_run_spec(spec)
        specs.append((spec, v, m))
    records = _run_many(cfg, ens, specs, True)
    res = ExperimentResult("escape", cfg.resolved())
    _record_files(res, records, "escape", True)
    summ = _summaries(records, cfg["steps"], True)
    for label in cfg["expect_no_escape"] or ():
        if label not in summ:
            raise ConfigError(f"expect_no_escape names {label!r}, which is not in runs")
        n_esc = summ[label]["escaped"]
        res.checks.append(Check(f"{label} never escapes", n_esc == 0, f"{n_esc} escaped"))
    micro_runs = sorted(((m, l) for l, v, m in specs if v.uses_micro and m is not None), reverse=True)
    if len(micro_runs) >= 2:
        labels = [l for _, l in micro_runs]
        meds = [summ[l]["_median_escape_censored"] for l in labels]
        ses = [summ[l]["escape_step_se"] for l in labels]
        bad = ordered_non_increasing(labels, meds, ses, cfg["n_se"], cfg["strict"])
        res.checks.append(Check("median escape step non-increasing as m decreases", not bad, "; ".join(bad)))
    res.results = {
        "runs": {l: {k: v for k, v in e.items() if not k.startswith("_")} for l, e in summ.items()},
        "sharp_min": ens.sharp_min.tolist(), "flat_min": ens.flat_min.tolist(), "barrier": ens.barrier.tolist(),
    }
    return res


def run_trace(cfg: RunConfig) -> ExperimentResult:
    """Final tr V per optimizer; medians must be non-increasing along ``runs``."""
    ens = build_ensemble(cfg)
    specs = []
    for spec in cfg["runs"]:
        v, m = parse_run_spec(spec)
        specs.append((spec, v, m))
    records = _run_many(cfg, ens, specs, False)
    res = ExperimentResult("trace", cfg.resolved())
    _record_files(res, records, "trace", False)
    summ = _summaries(records, cfg["steps"], False)
    labels = [s[0] for s in specs]
    meds = [summ[l]["median_final_trace_V"] for l in labels]
    ses = [summ[l]["final_trace_V_se"] for l in labels]
    bad = ordered_non_increasing(labels, meds, ses, cfg["n_se"], cfg["strict"])
    res.checks.append(Check("median final trace_V non-increasing along runs", not bad, "; ".join(bad)))
    res.files["trace_summary.csv"] = to_csv(
        ("run", "median_final_loss", "median_final_trace_V", "final_trace_V_se"),
        [(l, summ[l]["median_final_loss"], summ[l]["median_final_trace_V"], summ[l]["final_trace_V_se"]) for l in labels],
    )
    res.results = {"runs": summ}
    return res


def _loglog_slope(xs, ys):
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    slope, intercept = np.polyfit(lx, ly, 1)
    return float(slope), (ly - (slope * lx + intercept)).tolist()


def delta_sweep(ens, i, x, deltas, probes="exhaustive", draws=100_000, seed=0):
    """Estimator bias E_z[q_delta(z)^2] - ||grad f_i||^2 per delta, q = FD quotient.

    Also returns the per-probe remainder E_z|q_delta(z)^2 - (z . grad f_i)^2|,
    the quantity a first-order Taylor bound controls probe by probe.
    """
    x = np.asarray(x, dtype=np.float64)
    g = ens.grads_at(x, [i])[0]
    if probes == "exhaustive":
        Z = all_sign_vectors(ens.dim)
    else:
        Z = generator(seed, "delta-sweep").choice([-1.0, 1.0], size=(draws, ens.dim))
    f0 = float(ens.losses_at(x, [i])[0])
    rows = []
    for d in deltas:
        if not d > 0:
            raise ConfigError("delta must be > 0")
        fz = ens.losses_at(x[None, :] + d * Z, np.full((len(Z), 1), i))[:, 0]
        q2 = ((fz - f0) / d) ** 2
        lin2 = (Z @ g) ** 2
        rows.append((d, float(q2.mean() - g @ g), float(np.abs(q2 - lin2).mean())))
    return rows


def run_delta_sweep(cfg: RunConfig) -> ExperimentResult:
    ens = build_ensemble(cfg)
    i = cfg["sample"]
    if not 0 <= i < ens.n:
        raise ConfigError(f"sample {i} out of range [0, {ens.n})")
    x = _point(ens, cfg["x"])
    if x.shape != (ens.dim,):
        raise ConfigError(f"x must have {ens.dim} entries")
    if cfg["probes"] not in ("exhaustive", "random"):
        raise ConfigError("probes must be 'exhaustive' or 'random'")
    rows = delta_sweep(ens, i, x, cfg["delta_list"], cfg["probes"], cfg["draws"], cfg.seeds[0])
    res = ExperimentResult("delta-sweep", cfg.resolved())
    res.files["delta_sweep.csv"] = to_csv(("delta", "bias", "probe_remainder"), rows)
    out = {}
    for col, name in ((1, "bias"), (2, "probe_remainder")):
        vals = [abs(r[col]) for r in rows]
        if all(v > 0 for v in vals) and len(vals) >= 2:
            slope, resid = _loglog_slope([r[0] for r in rows], vals)
            out[f"{name}_slope"] = slope
            out[f"{name}_fit_residuals"] = resid
        else:
            out[f"{name}_slope"] = None
    out["max_abs_bias"] = max(abs(r[1]) for r in rows)
    lo, hi = cfg["slope_min"], cfg["slope_max"]
    if lo is not None or hi is not None:
        s = out["bias_slope"]
        ok = s is not None and (lo is None or s >= lo) and (hi is None or s <= hi)
        res.checks.append(Check("bias slope in range", ok, f"slope {s}"))
    res.results = out
    return res


def estimator_checks(scores=(1.0, 2.0), lambdas=(0.25, 0.5, 1.0, 2.0), deltas=(0.1, 0.01, 0.001, 1e-4),
                     v=(1.0, 1.0), gaussian_draws=1_000_000, seed=0, linear=None, quadratic=None):
    """Gibbs-weight and finite-difference estimator checks; returns (name, value, expected, tol, passed) rows."""
    rows = []
    s = np.asarray(scores, dtype=np.float64)
    w0 = gibbs_weights(s, 0.0).weights
    rows.append(("gibbs_uniform_at_lambda0", float(np.abs(w0 - 1.0 / s.size).max()), 0.0, 1e-15, bool(np.abs(w0 - 1.0 / s.size).max() <= 1e-15)))
    if s.size == 2:
        w1 = gibbs_weights(s, 1.0, normalization="none").weights
        ref = np.exp(s) / np.exp(s).sum()
        rows.append(("gibbs_raw_lambda1_w0", float(w1[0]), float(ref[0]), 1e-4, bool(abs(w1[0] - 0.2689) <= 1e-4)))
        rows.append(("gibbs_raw_lambda1_w1", float(w1[1]), float(ref[1]), 1e-4, bool(abs(w1[1] - 0.7311) <= 1e-4)))
    ents = [gibbs_weights(s, lam).entropy for lam in sorted(lambdas)]
    mono = all(b <= a + 1e-15 for a, b in zip(ents, ents[1:]))
    rows.append(("gibbs_entropy_non_increasing", float(max(np.diff(ents), default=0.0)), 0.0, 1e-15, bool(mono)))

    lin = linear or make_ensemble("linear", n=4, d=4, seed=seed)
    Z = all_sign_vectors(lin.dim)
    x = generator(seed, "estimator-x").standard_normal(lin.dim)
    err = max(abs(fd_norm_estimate(lin, i, x, 1e-3, probes=Z) - float(np.linalg.norm(lin.slopes[i]))) for i in range(lin.n))
    rows.append(("linear_exhaustive_exact", float(err), 0.0, 1e-12, bool(err <= 1e-12)))

    quad = quadratic or make_ensemble("shifted_quadratic", n=4, d=3, seed=seed, eigs=[1.0, 2.0, 4.0])
    xq = generator(seed, "estimator-xq").standard_normal(quad.dim)
    sweep = delta_sweep(quad, 0, xq, deltas)
    bias_slope, _ = _loglog_slope(deltas, [abs(r[1]) for r in sweep])
    rows.append(("quadratic_bias_slope", bias_slope, 1.0, 0.3, bool(0.7 <= bias_slope <= 1.3)))
    rem_slope, _ = _loglog_slope(deltas, [r[2] for r in sweep])
    rows.append(("quadratic_probe_remainder_slope", rem_slope, 1.0, 0.3, bool(0.7 <= rem_slope <= 1.3)))

    vv = np.asarray(v, dtype=np.float64)
    rad = float(np.mean((all_sign_vectors(vv.size) @ vv) ** 4))
    rad_ref = float(np.sum(vv ** 4) + 6 * sum(vv[j] ** 2 * vv[k] ** 2 for j in range(vv.size) for k in range(j + 1, vv.size)))
    rows.append(("rademacher_fourth_moment", rad, rad_ref, 1e-12, bool(abs(rad - rad_ref) <= 1e-12)))
    gz = generator(seed, "gaussian-moment").standard_normal((gaussian_draws, vv.size))
    gm = float(np.mean((gz @ vv) ** 4))
    g_ref = 3.0 * float(vv @ vv) ** 2
    rows.append(("gaussian_fourth_moment", gm, g_ref, 0.2, bool(abs(gm - g_ref) <= 0.2)))
    return rows


def run_verify_estimator(cfg: RunConfig) -> ExperimentResult:
    lin = build_ensemble(cfg) if cfg.ensemble else None
    if lin is not None and lin.family != "linear":
        raise ConfigError("verify-estimator's ensemble must be the linear family")
    rows = estimator_checks(cfg["scores"], cfg["lambda_list"], cfg["delta_list"], cfg["moment_vector"],
                            cfg["gaussian_draws"], cfg.seeds[0], linear=lin)
    res = ExperimentResult("verify-estimator", cfg.resolved())
    res.files["estimator.csv"] = to_csv(("check", "value", "expected", "tolerance", "passed"), rows)
    lo, hi = cfg["slope_min"], cfg["slope_max"]
    for name, value, expected, tol, passed in rows:
        if name == "quadratic_bias_slope":
            passed = lo <= value <= hi
        res.checks.append(Check(name, bool(passed), f"value {value!r} expected {expected!r}"))
    res.results = {r[0]: r[1] for r in rows}
    return res


def prop1_instances(count, n, d, seed):
    for j in range(count):
        ens = make_ensemble("shifted_quadratic", n=n, d=d, seed=seed * 1000 + j)
        x = generator(seed, "prop1-x", j).standard_normal(d)
        yield j, ens, x


def run_verify_prop1(cfg: RunConfig) -> ExperimentResult:
    if cfg.family != "shifted_quadratic":
        raise ConfigError("verify-prop1 draws Gaussian-gradient instances from the shifted_quadratic family")
    n = int(cfg.ensemble.get("n", 12))
    d = int(cfg.ensemble.get("d", 3))
    ks = sorted(set(cfg["k_list"]))
    if ks[-1] > n:
        raise ConfigError(f"k={ks[-1]} exceeds n={n}")
    rows, violations, mono_bad = [], 0, []
    for j, ens, x in prop1_instances(cfg["instances"], n, d, cfg.seeds[0]):
        vals = []
        for k in ks:
            rep = check_norm_bounds(ens, x, k, mode=cfg["mode"], samples=cfg["samples"], seed=cfg.seeds[0])
            rows.append((j, k, rep.lower, rep.value, rep.upper, rep.se, rep.holds))
            violations += not rep.holds
            vals.append((rep.value, rep.se))
        for (a, sa), (b, sb), k in zip(vals, vals[1:], ks[1:]):
            slack = cfg["n_se"] * math.hypot(sa, sb) + 1e-12 * (1 + a)
            if b > a + slack:
                mono_bad.append(f"instance {j}, k={k}")
    res = ExperimentResult("verify-prop1", cfg.resolved())
    res.files["prop1.csv"] = to_csv(("instance", "k", "lower", "value", "upper", "se", "holds"), rows)
    res.checks.append(Check("sandwich bounds hold", violations == 0, f"{violations} violations"))
    res.checks.append(Check("E||grad f_gamma|| non-increasing in k", not mono_bad, "; ".join(mono_bad)))
    res.results = {"instances": cfg["instances"], "n": n, "d": d, "k_list": ks, "violations": violations}
    return res


def _drift_plan(variant: Variant, k: int, batch_size: int):
    if variant.uses_micro:
        return max(batch_size, k), k
    return k, None


def run_verify_drift(cfg: RunConfig) -> ExperimentResult:
    ens = build_ensemble(cfg)
    x = _point(ens, cfg["x"])
    rows = []
    res = ExperimentResult("verify-drift", cfg.resolved())
    details = {}
    for name in cfg["variants"]:
        v = Variant(name)
        for k in cfg["k_list"]:
            B, m = _drift_plan(v, k, cfg["batch_size"])
            if m is not None and B % m:
                raise ConfigError(f"k={k} does not divide batch_size={B}")
            opt = OptimizerConfig(v, eta=cfg["eta"], rho=0.0 if v is Variant.SGD else cfg["rho"], batch_size=B, micro_size=m)
            sc = moment_scaling(ens, x, opt, cfg["replicates"], cfg.seeds[0], cfg["shrink_factor"])
            r = sc.coarse
            within = r.within(cfg["n_se"])
            for j in range(ens.dim):
                rows.append((v.value, k, j, r.empirical_first_moment[j], r.first_moment_se[j], r.predicted_first_moment[j],
                             r.remainder[j], r.remainder_se[j], within, sc.ratio, sc.exact_expansion))
            res.checks.append(Check(f"{v.value} k={k} drift within {cfg['n_se']:g} SE", within, f"z={r.residual_z:.3f}"))
            res.checks.append(Check(f"{v.value} k={k} remainder shrink", sc.passed,
                                    "exact expansion" if sc.exact_expansion else f"ratio {sc.ratio:.3f}"))
            details[f"{v.value}@{k}"] = {"coarse": r.to_json(), "fine": sc.fine.to_json(), "ratio": sc.ratio,
                                         "exact_expansion": sc.exact_expansion}
    res.files["drift.csv"] = to_csv(
        ("variant", "k", "coord", "empirical", "se", "predicted", "remainder", "remainder_se", "within", "shrink_ratio", "exact_expansion"),
        rows,
    )
    res.results = details
    return res


def run_verify_weak_order(cfg: RunConfig) -> ExperimentResult:
    ens = build_ensemble(cfg)
    x0 = _point(ens, cfg["x0"])
    res = ExperimentResult("verify-weak-order", cfg.resolved())
    out = {}
    n_inconclusive = 0
    for name in cfg["variants"]:
        rep = weak_error_grid(
            ens, x0, name, cfg["g"], cfg["eta_list"], cfg["rho_list"], cfg["T"], cfg["replicates"], cfg.seeds[0],
            cfg["batch_size"], cfg["micro_size"], cfg["kappa"], cfg["kappa_check"],
        )
        res.files[f"weak_{rep.variant}.csv"] = rep.to_csv()
        n_inconclusive += sum(c.inconclusive for c in rep.cells)
        for gid in cfg["g"]:
            fit = rep.eta_slopes.get(gid)
            slope = None if fit is None else fit.slope
            ok = slope is not None and cfg["slope_min"] <= slope <= cfg["slope_max"]
            res.checks.append(Check(f"{rep.variant} g={gid} eta-slope in [{cfg['slope_min']:g}, {cfg['slope_max']:g}]", ok, f"slope {slope}"))
        if cfg["kappa_check"]:
            guard = all(c.kappa_guard for c in rep.cells)
            res.checks.append(Check(f"{rep.variant} doubling kappa moves errors by <= 1 SE", guard))
        out[rep.variant] = rep.to_json()
    res.inconclusive = n_inconclusive > cfg["max_inconclusive"]
    res.results = {"reports": out, "inconclusive_cells": n_inconclusive}
    return res


RUNNERS = {
    "verify-drift": run_verify_drift,
    "verify-weak-order": run_verify_weak_order,
    "verify-prop1": run_verify_prop1,
    "verify-estimator": run_verify_estimator,
    "msweep": run_msweep,
    "escape": run_escape,
    "trace": run_trace,
    "delta-sweep": run_delta_sweep,
}


def run(cfg: RunConfig) -> ExperimentResult:
    return RUNNERS[cfg.experiment](cfg)
