"""Flat ``key = value`` run configuration with a per-experiment schema.

Format::

    # comment
    experiment = msweep
    family = two_basin
    ensemble.n = 64          # generation parameters of the ensemble
    eta = 0.05
    m_list = 1, 2, 4, 8
    seeds = 10               # a count (0..9) or an explicit list "3, 7, 11"

Unknown keys, duplicates and malformed values raise ``ConfigError``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from samlab.errors import ConfigError

EXPERIMENTS = (
    "verify-drift", "verify-weak-order", "verify-prop1", "verify-estimator",
    "msweep", "escape", "trace", "delta-sweep",
)
FORMATS = ("csv", "json")


def _float(s):
    return float(s)


def _int(s):
    v = float(s)
    if v != int(v):
        raise ValueError(f"{s!r} is not an integer")
    return int(v)


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


def _list(item):
    def parse(s):
        parts = [p.strip() for p in s.split(",") if p.strip()]
        if not parts:
            raise ValueError("empty list")
        return tuple(item(p) for p in parts)
    return parse


def _opt(item):
    def parse(s):
        return None if s.strip().lower() in ("none", "") else item(s)
    return parse


def _str(s):
    return s.strip()


FLOATS, INTS, STRS = _list(_float), _list(_int), _list(_str)

# key -> (parser, default); defaults are strings run through the parser so
# the resolved config always has canonical types.
_COMMON = {
    "family": (_str, None),
    "seeds": (_str, "1"),
    "format": (STRS, "csv,json"),
}

_TRAIN = {
    "eta": (_float, "0.05"),
    "rho": (_float, "0.05"),
    "batch_size": (_int, "8"),
    "steps": (_int, "1000"),
    "record_every": (_int, "10"),
    "lambda": (_float, "0.5"),
    "delta": (_float, "1e-3"),
    "q_probes": (_int, "1"),
    "n_se": (_float, "3"),
    "strict": (_bool, "false"),
    "x0": (_opt(FLOATS), "none"),
}

# long enough for escapes from the default two_basin geometry to show up
_BASIN_TRAIN = {"eta": (_float, "0.1"), "steps": (_int, "4000"), "record_every": (_int, "100")}

SCHEMAS = {
    "verify-drift": {
        "family": (_str, "heteroscedastic_quadratic"),
        "variants": (STRS, "sgd,minibatch_usam,n_usam,m_usam,minibatch_sam,n_sam,m_sam"),
        "eta": (_float, "0.01"),
        "rho": (_float, "0.1"),
        "k_list": (INTS, "1,2,4"),
        "batch_size": (_int, "4"),
        "replicates": (_int, "100000"),
        "x": (_opt(FLOATS), "none"),
        "shrink_factor": (_float, "1.5"),
        "n_se": (_float, "3"),
    },
    "verify-weak-order": {
        "family": (_str, "heteroscedastic_quadratic"),
        "variants": (STRS, "minibatch_usam,minibatch_sam"),
        "g": (STRS, "x0,x0*x0"),
        "eta_list": (FLOATS, "0.04,0.02,0.01"),
        "rho_list": (FLOATS, "0.01"),
        "T": (_float, "1"),
        "replicates": (_int, "100000"),
        "batch_size": (_int, "1"),
        "micro_size": (_opt(_int), "none"),
        "kappa": (_int, "10"),
        "kappa_check": (_bool, "false"),
        "slope_min": (_float, "0.7"),
        "slope_max": (_float, "1.3"),
        "max_inconclusive": (_int, "1"),
        "x0": (_opt(FLOATS), "none"),
    },
    "verify-prop1": {
        "family": (_str, "shifted_quadratic"),
        "instances": (_int, "20"),
        "k_list": (INTS, "1,2,4,8"),
        "mode": (_str, "auto"),
        "samples": (_int, "200000"),
        "n_se": (_float, "3"),
    },
    "verify-estimator": {
        "family": (_str, "linear"),
        "scores": (FLOATS, "1,2"),
        "lambda_list": (FLOATS, "0.25,0.5,1,2"),
        "delta_list": (FLOATS, "0.1,0.01,0.001,0.0001"),
        "moment_vector": (FLOATS, "1,1"),
        "gaussian_draws": (_int, "1000000"),
        "slope_min": (_float, "0.7"),
        "slope_max": (_float, "1.3"),
    },
    "delta-sweep": {
        "family": (_str, "shifted_quadratic"),
        "sample": (_int, "0"),
        "x": (_opt(FLOATS), "none"),
        "delta_list": (FLOATS, "0.1,0.01,0.001,0.0001"),
        "probes": (_str, "exhaustive"),
        "draws": (_int, "100000"),
        "slope_min": (_opt(_float), "none"),
        "slope_max": (_opt(_float), "none"),
    },
    "msweep": {
        "family": (_str, "two_basin"),
        "variant": (_str, "m_sam"),
        "m_list": (INTS, "1,2,4,8"),
        **_TRAIN,
        **_BASIN_TRAIN,
    },
    "escape": {
        "family": (_str, "two_basin"),
        "runs": (STRS, "sgd,minibatch_sam,m_sam@8,m_sam@1"),
        "expect_no_escape": (_opt(STRS), "sgd"),
        **_TRAIN,
        **_BASIN_TRAIN,
    },
    "trace": {
        "family": (_str, "tiny_mlp"),
        "runs": (STRS, "sgd,minibatch_sam,reweighted_sam"),
        **_TRAIN,
        "steps": (_int, "2000"),
        "record_every": (_int, "100"),
    },
}


def parse_value(text: str):
    """Type a free-form ensemble parameter: int, float, bool, JSON array, else string."""
    s = text.strip()
    if s.startswith("["):
        return json.loads(s)
    for fn in (_int, _float):
        try:
            return fn(s)
        except ValueError:
            pass
    if s.lower() in ("true", "false"):
        return s.lower() == "true"
    return s


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    params: dict
    ensemble: dict = field(default_factory=dict)
    seeds: tuple = (0,)

    @property
    def family(self) -> str:
        return self.params["family"]

    @property
    def formats(self) -> tuple:
        return self.params["format"]

    def __getitem__(self, key):
        return self.params[key]

    def resolved(self) -> dict:
        """JSON-ready view with every default filled in."""
        out = {"experiment": self.experiment, "ensemble": dict(sorted(self.ensemble.items())), "seeds": list(self.seeds)}
        for k, v in sorted(self.params.items()):
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    def with_seed_count(self, n: int) -> "RunConfig":
        if n < 1:
            raise ConfigError("--seeds must be >= 1")
        return RunConfig(self.experiment, self.params, self.ensemble, tuple(range(n)))

    def with_formats(self, formats) -> "RunConfig":
        fm = tuple(formats)
        bad = [f for f in fm if f not in FORMATS]
        if bad or not fm:
            raise ConfigError(f"unknown output formats {bad}; expected a subset of {FORMATS}")
        return RunConfig(self.experiment, {**self.params, "format": fm}, self.ensemble, self.seeds)


def _parse_seeds(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    try:
        vals = [_int(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"bad seeds value {text!r}: {exc}") from None
    if len(vals) == 1:
        if vals[0] < 1:
            raise ConfigError("seed count must be >= 1")
        return tuple(range(vals[0]))
    if any(v < 0 for v in vals) or len(set(vals)) != len(vals):
        raise ConfigError("explicit seeds must be distinct non-negative integers")
    return tuple(vals)


def parse_config(text: str) -> RunConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in body.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    experiment = raw.pop("experiment", None)
    if experiment not in SCHEMAS:
        raise ConfigError(f"'experiment' must be one of {EXPERIMENTS}, got {experiment!r}")
    schema = {**_COMMON, **SCHEMAS[experiment]}
    ensemble = {}
    for key in [k for k in raw if k.startswith("ensemble.")]:
        name = key[len("ensemble."):]
        if not name:
            raise ConfigError("empty ensemble parameter name")
        try:
            ensemble[name] = parse_value(raw.pop(key))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown keys for {experiment}: {unknown}")
    params = {}
    for key, (parser, default) in schema.items():
        if key == "seeds":
            continue
        text_value = raw.get(key, default)
        if text_value is None:
            raise ConfigError(f"missing required key {key!r}")
        try:
            params[key] = parser(text_value)
        except (ValueError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{key}: {exc}") from None
    seeds = _parse_seeds(raw.get("seeds", _COMMON["seeds"][1]))
    cfg = RunConfig(experiment, params, ensemble, seeds)
    return cfg.with_formats(params["format"])


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
