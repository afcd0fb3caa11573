"""Strict JSON run configuration.

Every section has documented defaults; unknown keys are rejected with the
dotted path of the offending field.  A single top-level ``seed`` drives all
randomness (teacher, initialization, mini-batches, certificate grid).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from typing import Any, Optional

from .errors import ConfigurationError
from .flow import InitScheme, IntegratorConfig
from .problems import Problem, problem_from_dict

__all__ = [
    "RunConfig",
    "BenchConfig",
    "load_json",
    "parse_run_config",
    "parse_bench_config",
    "resolve_config_path",
    "bundled_configs",
]


class ConfigError(ConfigurationError):
    """Configuration problem located at a dotted field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


# ---------------------------------------------------------------------------
# Low-level helpers
# ---------------------------------------------------------------------------


def bundled_configs() -> list:
    root = resources.files("meaflow") / "configs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


def resolve_config_path(path: str) -> str:
    """Return ``path`` if it exists, else the bundled config of that name."""
    if os.path.exists(path):
        return path
    name = os.path.basename(path)
    candidate = resources.files("meaflow") / "configs" / name
    if candidate.is_file():
        return str(candidate)
    raise ConfigError("", f"config file not found: {path}")


def load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError("", "top level must be a JSON object")
    return data


def _take(section: dict, path: str, allowed: dict) -> dict:
    """Check keys and types of a section against ``{key: (types, default)}``."""
    if not isinstance(section, dict):
        raise ConfigError(path, "must be an object")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    out = {}
    for key, (types, default) in allowed.items():
        if key in section:
            value = section[key]
            if value is not None and types is not None:
                if isinstance(value, bool) and bool not in types:
                    raise ConfigError(f"{path}.{key}", f"expected {_type_names(types)}")
                if not isinstance(value, types):
                    raise ConfigError(f"{path}.{key}", f"expected {_type_names(types)}")
            out[key] = value
        else:
            out[key] = default
    return out


def _type_names(types) -> str:
    names = {int: "integer", float: "number", str: "string", bool: "boolean",
             list: "array", dict: "object"}
    return " or ".join(names.get(t, t.__name__) for t in types)


NUM = (int, float)


def _positive(path, value, allow_zero=False):
    if value is None:
        return
    ok = value >= 0 if allow_zero else value > 0
    if not ok or not math.isfinite(value):
        raise ConfigError(path, "must be " + ("nonnegative" if allow_zero else "positive"))


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------

_TEACHER_KEYS = {
    "m0": ((int,), 5),
    "noise": (NUM, 0.0),
    "n": ((int,), 256),
    "order": ((int,), 7),
    "lam": (NUM, 1.0),
    "reg_weight": (NUM, None),
    "input_dim": ((int,), 1),
    "n_test": ((int,), 4096),
    "min_separation": (NUM, 0.1),
    "weight_range": ((list,), [0.5, 1.5]),
    "normalize": ((bool,), False),
    "active_range": ((list,), [0.2, 0.8]),
    "loss": ((str,), "quadratic"),
}

_INIT_KEYS = {
    "kind": ((str,), "grid_zero_slice"),
    "m": ((int,), 100),
    "r0": (NUM, 0.1),
    "offset": (NUM, 1.0),
    "box": (NUM, 3.0),
    "positions": ((list,), None),
    "tags": ((list,), None),
}

_INTEGRATOR_KEYS = {
    "method": ((str,), "forward_backward"),
    "dt": (NUM, None),
    "safety": (NUM, 10.0),
    "refresh_every": ((int,), None),
    "monotone": ((bool,), True),
    "max_steps": ((int,), 10000),
    "tolerance": (NUM, 1e-10),
    "horizon": (NUM, None),
    "history_every": ((int,), 1),
    "snapshots": ((bool,), True),
    "norm_bound": (NUM, None),
    "batch_size": ((int,), 64),
    "sgd_seed": ((int,), 0),
}

_CERT_KEYS = {
    "tolerance": (NUM, 1e-3),
    "support_threshold": (NUM, 1e-8),
    "grid_points": ((int,), None),
}

_OUTPUT_KEYS = {
    "directory": ((str,), None),
    "formats": ((list,), ["json", "csv"]),
    "wallclock": ((bool,), True),
}


def parse_teacher(section: dict, path: str) -> dict:
    t = _take(section, path, _TEACHER_KEYS)
    if t["m0"] < 1:
        raise ConfigError(f"{path}.m0", "must be at least 1")
    _positive(f"{path}.noise", t["noise"], allow_zero=True)
    _positive(f"{path}.lam", t["lam"])
    if t["reg_weight"] is not None:
        _positive(f"{path}.reg_weight", t["reg_weight"], allow_zero=True)
    if t["loss"] not in ("quadratic", "logistic"):
        raise ConfigError(f"{path}.loss", "expected 'quadratic' or 'logistic'")
    for key in ("weight_range", "active_range"):
        v = t[key]
        if len(v) != 2 or not all(isinstance(x, NUM) for x in v) or v[0] > v[1]:
            raise ConfigError(f"{path}.{key}", "expected [low, high]")
    t["weight_range"] = tuple(float(x) for x in t["weight_range"])
    t["active_range"] = tuple(float(x) for x in t["active_range"])
    return t


def parse_init(section: dict, path: str = "init") -> dict:
    i = _take(section, path, _INIT_KEYS)
    if i["m"] < 1:
        raise ConfigError(f"{path}.m", "must be at least 1")
    _positive(f"{path}.r0", i["r0"])
    _positive(f"{path}.box", i["box"])
    return i


def parse_integrator(section: dict, path: str = "integrator") -> IntegratorConfig:
    g = _take(section, path, _INTEGRATOR_KEYS)
    if g["method"] not in ("forward_backward", "sgd"):
        raise ConfigError(f"{path}.method", "expected 'forward_backward' or 'sgd'")
    _positive(f"{path}.dt", g["dt"])
    _positive(f"{path}.safety", g["safety"])
    _positive(f"{path}.tolerance", g["tolerance"], allow_zero=True)
    _positive(f"{path}.horizon", g["horizon"], allow_zero=True)
    _positive(f"{path}.norm_bound", g["norm_bound"])
    for key in ("max_steps",):
        if g[key] < 0:
            raise ConfigError(f"{path}.{key}", "must be nonnegative")
    for key in ("history_every", "batch_size"):
        if g[key] < 1:
            raise ConfigError(f"{path}.{key}", "must be at least 1")
    if g["refresh_every"] is not None and g["refresh_every"] < 1:
        raise ConfigError(f"{path}.refresh_every", "must be at least 1")
    if g["norm_bound"] is None:
        g["norm_bound"] = math.inf
    for key in ("dt", "safety", "tolerance", "horizon", "norm_bound"):
        if g[key] is not None:
            g[key] = float(g[key])
    return IntegratorConfig(**g)


def parse_certificate(section: dict, path: str = "certificate") -> dict:
    c = _take(section, path, _CERT_KEYS)
    _positive(f"{path}.tolerance", c["tolerance"])
    _positive(f"{path}.support_threshold", c["support_threshold"], allow_zero=True)
    if c["grid_points"] is not None and c["grid_points"] < 1:
        raise ConfigError(f"{path}.grid_points", "must be at least 1")
    return c


def parse_output(section: dict, path: str = "output") -> dict:
    o = _take(section, path, _OUTPUT_KEYS)
    bad = [f for f in o["formats"] if f not in ("json", "csv")]
    if bad:
        raise ConfigError(f"{path}.formats", f"unknown format {bad[0]!r}")
    return o


def _parse_seed(value, override) -> int:
    seed = override if override is not None else value
    if seed is None:
        raise ConfigError("seed", "a seed is required (set 'seed' in the config or pass --seed)")
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", "must be a nonnegative integer")
    return int(seed)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Parsed ``run``/``certify``/``check-grad`` configuration.

    Sections: ``problem`` (a family with either a ``teacher`` block or an
    explicit problem description), ``init``, ``integrator``, ``certificate``
    and ``output``.
    """

    seed: int
    problem: dict
    init: dict
    integrator: IntegratorConfig
    certificate: dict
    output: dict
    base_dir: str = "."

    def build_problem(self):
        """Return ``(problem, teacher_or_None)``."""
        from .bench import make_teacher

        desc = dict(self.problem)
        if "teacher" in desc:
            family = desc.pop("family")
            teacher_kw = dict(desc.pop("teacher"))
            m0 = teacher_kw.pop("m0")
            return make_teacher(family, m0, self.seed, **teacher_kw)[::-1]
        return problem_from_dict(desc, base_dir=self.base_dir), None

    def init_scheme(self) -> InitScheme:
        i = dict(self.init)
        return InitScheme(kind=i["kind"], m=i["m"], r0=i["r0"], offset=i["offset"], box=i["box"],
                          seed=self.seed,
                          positions=None if i["positions"] is None else tuple(map(tuple, i["positions"])),
                          tags=None if i["tags"] is None else tuple(i["tags"]))


_FAMILIES = ("deconvolution", "sigmoid", "relu_signed_square", "relu_classic")


def parse_problem(section: dict, path: str = "problem") -> dict:
    if not isinstance(section, dict):
        raise ConfigError(path, "must be an object")
    family = section.get("family")
    if family not in _FAMILIES:
        raise ConfigError(f"{path}.family", f"expected one of {list(_FAMILIES)}")
    if "teacher" in section:
        extra = sorted(set(section) - {"family", "teacher"})
        if extra:
            raise ConfigError(f"{path}.{extra[0]}", "unknown key (a teacher block fixes the data)")
        return {"family": family, "teacher": parse_teacher(section["teacher"], f"{path}.teacher")}
    try:
        problem_from_dict(dict(section)) if "dataset" not in section else None
    except ConfigurationError as exc:
        raise ConfigError(path, str(exc)) from exc
    return dict(section)


def parse_run_config(data: dict, seed_override: Optional[int] = None,
                     base_dir: str = ".") -> RunConfig:
    top = _take(data, "", {
        "seed": ((int,), None),
        "problem": ((dict,), None),
        "init": ((dict,), {}),
        "integrator": ((dict,), {}),
        "certificate": ((dict,), {}),
        "output": ((dict,), {}),
    })
    seed = _parse_seed(top["seed"], seed_override)
    if top["problem"] is None:
        raise ConfigError("problem", "missing section")
    integ = parse_integrator(top["integrator"])
    if integ.method == "sgd":
        integ = replace(integ, sgd_seed=seed)
    return RunConfig(
        seed=seed,
        problem=parse_problem(top["problem"]),
        init=parse_init(top["init"]),
        integrator=integ,
        certificate=parse_certificate(top["certificate"]),
        output=parse_output(top["output"]),
        base_dir=base_dir,
    )


# ---------------------------------------------------------------------------
# Bench configuration
# ---------------------------------------------------------------------------


@dataclass
class BenchConfig:
    seed: int
    family: str
    teacher: dict
    init: dict
    integrator: IntegratorConfig
    m_list: list
    n_seeds: int
    certificate_tolerance: float
    reference: str
    baseline: bool
    baseline_fit_samples: int
    certify_nets: bool
    output: dict

    @property
    def seeds(self) -> list:
        return [self.seed + k for k in range(self.n_seeds)]

    def sweep_config(self):
        from .bench import SweepConfig

        teacher = dict(self.teacher)
        m0 = teacher.pop("m0")
        init = {k: v for k, v in self.init.items() if k not in ("m", "positions", "tags")}
        return SweepConfig(
            family=self.family, m0=m0, teacher=teacher, init=init,
            integrator=self.integrator, certificate_tolerance=self.certificate_tolerance,
            reference=self.reference, baseline=self.baseline,
            baseline_fit_samples=self.baseline_fit_samples, certify_nets=self.certify_nets)


def parse_bench_config(data: dict, seed_override: Optional[int] = None) -> BenchConfig:
    top = _take(data, "", {
        "seed": ((int,), None),
        "sweep": ((dict,), None),
        "output": ((dict,), {}),
    })
    seed = _parse_seed(top["seed"], seed_override)
    if top["sweep"] is None:
        raise ConfigError("sweep", "missing section")
    s = _take(top["sweep"], "sweep", {
        "family": ((str,), None),
        "teacher": ((dict,), {}),
        "init": ((dict,), {}),
        "integrator": ((dict,), {}),
        "m_list": ((list,), None),
        "n_seeds": ((int,), 10),
        "certificate_tolerance": (NUM, 1e-3),
        "reference": ((str,), "best"),
        "baseline": ((bool,), True),
        "baseline_fit_samples": ((int,), 20000),
        "certify_nets": ((bool,), False),
    })
    if s["family"] not in _FAMILIES:
        raise ConfigError("sweep.family", f"expected one of {list(_FAMILIES)}")
    if not s["m_list"] or not all(isinstance(m, int) and not isinstance(m, bool) and m >= 1
                                  for m in s["m_list"]):
        raise ConfigError("sweep.m_list", "expected a non-empty list of positive integers")
    if s["n_seeds"] < 1:
        raise ConfigError("sweep.n_seeds", "must be at least 1")
    if s["reference"] not in ("best", "zero"):
        raise ConfigError("sweep.reference", "expected 'best' or 'zero'")
    _positive("sweep.certificate_tolerance", s["certificate_tolerance"])
    return BenchConfig(
        seed=seed, family=s["family"], teacher=parse_teacher(s["teacher"], "sweep.teacher"),
        init=parse_init(s["init"], "sweep.init"),
        integrator=parse_integrator(s["integrator"], "sweep.integrator"),
        m_list=list(s["m_list"]), n_seeds=s["n_seeds"],
        certificate_tolerance=float(s["certificate_tolerance"]), reference=s["reference"],
        baseline=s["baseline"], baseline_fit_samples=s["baseline_fit_samples"],
        certify_nets=s["certify_nets"], output=parse_output(top["output"]))
