"""Run configuration: JSON schema validation, defaults and object construction."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .discovery import ScenarioConstraints, SearchConfig
from .envs import default_config
from .policies import CONTROLLER_ENV, make_controller
from .portfolio import REFERENCE_FACTORIES, Portfolio, default_portfolio
from .rulekit import RuleParams


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


_num = {"type": "number"}
_int = {"type": "integer"}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj(
    {
        "env": {"enum": ["abr", "lb"]},
        "controller": _obj({"name": {"type": "string"}, "params": {"type": "object"}}, ["name"]),
        "portfolio": _obj(
            {
                "members": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "oracle_window": {"type": "integer", "minimum": 1, "maximum": 8},
            }
        ),
        "constraints": _obj(
            {
                "horizon": {"type": "integer", "minimum": 0},
                "bounds": {"type": "array", "items": _pair},
                "max_step_ratio": {"type": ["number", "null"], "minimum": 1},
                "mean_bounds": {"type": ["array", "null"], "items": _pair},
                "log_scale": {"type": "array", "items": {"type": "boolean"}},
            }
        ),
        "search": _obj(
            {
                "method": {"enum": ["cem", "random", "hillclimb"]},
                "budget": {"type": "integer", "minimum": 1},
                "population": {"type": "integer", "minimum": 1},
                "elites": {"type": "integer", "minimum": 1},
                "segments": {"type": "integer", "minimum": 1},
                "top_k": {"type": "integer", "minimum": 1},
                "smoothing": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "init_sigma": {"type": "number", "exclusiveMinimum": 0},
                "min_sigma": {"type": "number", "minimum": 0},
                "hc_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            }
        ),
        "rules": _obj(
            {
                "max_conjuncts": {"type": "integer", "minimum": 1},
                "min_coverage": {"type": "integer", "minimum": 1},
                "min_precision": {"type": "number", "minimum": 0, "maximum": 1},
                "bound_percentile": {"type": "number", "minimum": 0, "maximum": 100},
            }
        ),
        "labeling": _obj(
            {
                "tau": {"type": ["number", "null"], "minimum": 0},
                "tau_percentile": {"type": "number", "minimum": 0, "maximum": 100},
                "normal_anchors": {"type": "boolean"},
            }
        ),
        "shield": _obj({"delta": {"type": "number", "minimum": 0}}),
        "normal": _obj({"episodes": {"type": "integer", "minimum": 1}, "horizon": _int}),
        "seed": {"type": "integer", "minimum": 0},
        "rounds": {"type": "integer", "minimum": 1},
        "workers": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
    },
    ["env", "controller"],
)


DEFAULTS = {
    "portfolio": {"oracle_window": 5},
    "constraints": {},
    "search": {},
    "rules": {},
    "labeling": {"tau": None, "tau_percentile": 75.0, "normal_anchors": True},
    "shield": {"delta": 0.1},
    "normal": {"episodes": 20},
    "seed": 0,
    "rounds": 2,
    "workers": 1,
    "output_dir": "out",
}


def validate(doc) -> dict:
    """Validate against the schema; raises :class:`ConfigError` naming the offending field."""
    v = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(v.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        e = errors[0]
        path = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(path, e.message)
    out = copy.deepcopy(DEFAULTS)
    for k, val in doc.items():
        if isinstance(val, dict) and isinstance(out.get(k), dict):
            out[k].update(val)
        else:
            out[k] = val
    name = out["controller"]["name"]
    if name not in CONTROLLER_ENV and not (name.endswith(".json") and Path(name).exists()):
        raise ConfigError("controller.name", f"unknown controller {name!r}")
    if name in CONTROLLER_ENV and CONTROLLER_ENV[name] != out["env"]:
        raise ConfigError("controller.name", f"{name} is an {CONTROLLER_ENV[name]} controller")
    for m in out["portfolio"].get("members", []):
        if m not in REFERENCE_FACTORIES:
            raise ConfigError("portfolio.members", f"unknown reference {m!r}")
    return out


def load_config(path: str | Path) -> dict:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return validate(doc)


def build_controller(conf: dict):
    c = conf["controller"]
    try:
        return make_controller(c["name"], **c.get("params", {}))
    except TypeError as exc:
        raise ConfigError("controller.params", str(exc)) from exc


def build_portfolio(conf: dict) -> Portfolio:
    env = conf["env"]
    pconf = conf["portfolio"]
    K = pconf.get("oracle_window", 5)
    if "members" not in pconf:
        return default_portfolio(env, K)
    members = [REFERENCE_FACTORIES[m](K=K) if m == "oracle" else REFERENCE_FACTORIES[m]() for m in pconf["members"]]
    return Portfolio(members, env)


def build_constraints(conf: dict) -> ScenarioConstraints:
    base = ScenarioConstraints.default(conf["env"], conf["constraints"].get("horizon"))
    c = conf["constraints"]
    try:
        return ScenarioConstraints(
            conf["env"],
            base.horizon,
            c.get("bounds", base.bounds),
            c.get("max_step_ratio") or float("inf"),
            c.get("mean_bounds"),
            c.get("log_scale"),
        )
    except ValueError as exc:
        raise ConfigError("constraints", str(exc)) from exc


def build_search(conf: dict) -> SearchConfig:
    try:
        return SearchConfig(**conf["search"], workers=conf["workers"])
    except ValueError as exc:
        raise ConfigError("search", str(exc)) from exc


def build_rule_params(conf: dict) -> RuleParams:
    return RuleParams(**conf["rules"])


def build_env_config(conf: dict):
    return default_config(conf["env"])
