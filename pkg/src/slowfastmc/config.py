"""Experiment configuration: YAML parsing, defaulting and validation.

The config file is a single nested key-value document.  Unknown keys are
hard errors (no silent typo tolerance) and every violated field is
reported in one pass.  CLI flags override file values.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .coefficients import SYSTEM_CATALOG
from .convergence import FUNCTIONALS
from .errors import ConfigError
from .finance import LSV_CATALOG, OPTION_KINDS, WEIGHT_CATALOG

DEFAULTS: dict = {
    "model": {"name": "ref-ou", "params": {}},
    "grid": {"t_end": 1.0, "n_steps": 250, "nu": 20, "substeps": None},
    "mc": {"n_paths": 20000, "seed": 20240901, "workers": 1, "batch_size": 4096},
    "sweep": {"epsilons": [0.2, 0.05, 0.0125], "functionals": ["cos", "tanh"],
              "ks_times": None},
    "ergodic": {
        "burn_in": None,
        "horizon": None,
        "step": 1e-3,
        "strands": 16,
        "batches": 32,
        "t_nodes": [0.0, 0.5, 1.0],
        "x_nodes": [-2.0, -1.0, 0.0, 1.0, 2.0],
        "s_nodes": [0.5, 0.75, 1.0, 1.5, 2.0, 2.5],
    },
    "finance": {"model": "lsv-tanh", "params": {}, "rate": 0.02, "gamma_mpr": 0.1},
    "option": {
        "kind": "european",
        "strike": 1.0,
        "cap": None,
        "maturity": 1.0,
        "smoothing": None,
        "weight": "one",
    },
    "output": {"dir": None, "timing": False},
}


@dataclass
class ExperimentConfig:
    """Validated, fully defaulted experiment description."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def config_hash(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def echo_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)


def _merge(defaults: dict, user: dict, path: str, errors: list[str]) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            errors.append(f"{here}: unknown key")
            continue
        if isinstance(defaults[key], dict) and key not in ("params",):
            if not isinstance(val, dict):
                errors.append(f"{here}: expected a mapping")
                continue
            out[key] = _merge(defaults[key], val, here, errors)
        else:
            out[key] = val
    return out


def _require_number(cfg, section, key, errors, *, low=None, high=None,
                    integer=False, optional=False, strict_low=False):
    val = cfg[section][key]
    here = f"{section}.{key}"
    if val is None:
        if not optional:
            errors.append(f"{here}: required")
        return
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        errors.append(f"{here}: expected a number, got {val!r}")
        return
    if integer and int(val) != val:
        errors.append(f"{here}: expected an integer, got {val!r}")
        return
    if low is not None and (val <= low if strict_low else val < low):
        op = ">" if strict_low else ">="
        errors.append(f"{here}: must be {op} {low}, got {val}")
    if high is not None and val > high:
        errors.append(f"{here}: must be <= {high}, got {val}")


def validate_config(raw_text: str | None, overrides: dict | None = None) -> ExperimentConfig:
    """Parse, default and validate a config document.

    ``overrides`` maps dotted paths (e.g. "mc.seed") to values and wins
    over file values.  All violations are collected into one ConfigError.
    """
    errors: list[str] = []
    user: dict = {}
    if raw_text:
        try:
            loaded = yaml.safe_load(raw_text)
        except yaml.YAMLError as exc:
            raise ConfigError([f"config is not well-formed YAML: {exc}"]) from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(["config root must be a mapping"])
        user = loaded

    data = _merge(DEFAULTS, user, "", errors)
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if section not in data or key not in data[section]:
            errors.append(f"{dotted}: unknown override")
            continue
        data[section][key] = value
    cfg = ExperimentConfig(data)

    name = data["model"]["name"]
    if name not in SYSTEM_CATALOG:
        known = ", ".join(sorted(SYSTEM_CATALOG))
        errors.append(f"model.name: unknown model {name!r}; catalog: {known}")
    fmodel = data["finance"]["model"]
    if fmodel not in LSV_CATALOG:
        known = ", ".join(sorted(LSV_CATALOG))
        errors.append(f"finance.model: unknown model {fmodel!r}; catalog: {known}")

    _require_number(cfg.data, "grid", "t_end", errors, low=0, strict_low=True)
    _require_number(cfg.data, "grid", "n_steps", errors, low=1, integer=True)
    _require_number(cfg.data, "grid", "nu", errors, low=1, integer=True)
    _require_number(cfg.data, "grid", "substeps", errors, low=1, integer=True, optional=True)
    _require_number(cfg.data, "mc", "n_paths", errors, low=100, integer=True)
    _require_number(cfg.data, "mc", "seed", errors, integer=True)
    _require_number(cfg.data, "mc", "workers", errors, low=1, integer=True)
    _require_number(cfg.data, "mc", "batch_size", errors, low=1, integer=True)
    _require_number(cfg.data, "ergodic", "burn_in", errors, low=0, optional=True)
    _require_number(cfg.data, "ergodic", "horizon", errors, low=0, strict_low=True, optional=True)
    _require_number(cfg.data, "ergodic", "step", errors, low=0, strict_low=True)
    _require_number(cfg.data, "ergodic", "strands", errors, low=1, integer=True)
    _require_number(cfg.data, "ergodic", "batches", errors, low=4, integer=True)
    _require_number(cfg.data, "finance", "rate", errors)
    _require_number(cfg.data, "finance", "gamma_mpr", errors)

    eps = data["sweep"]["epsilons"]
    if not isinstance(eps, list) or not eps:
        errors.append("sweep.epsilons: expected a non-empty list")
    else:
        for e in eps:
            if isinstance(e, bool) or not isinstance(e, (int, float)) or not (0 < e < 1):
                errors.append(f"sweep.epsilons: values must lie in (0, 1), got {e!r}")
        if all(isinstance(e, (int, float)) and not isinstance(e, bool) for e in eps):
            if any(b >= a for a, b in zip(eps, eps[1:])):
                errors.append("sweep.epsilons: must be strictly decreasing")
    funcs = data["sweep"]["functionals"]
    if not isinstance(funcs, list) or not funcs:
        errors.append("sweep.functionals: expected a non-empty list")
    else:
        for f in funcs:
            if f not in FUNCTIONALS:
                errors.append(
                    f"sweep.functionals: unknown functional {f!r}; "
                    f"catalog: {', '.join(sorted(FUNCTIONALS))}"
                )
    ks_times = data["sweep"]["ks_times"]
    if ks_times is not None:
        if not isinstance(ks_times, list) or not ks_times:
            errors.append("sweep.ks_times: expected a non-empty list or null")
        elif any(
            isinstance(t, bool) or not isinstance(t, (int, float)) or t <= 0
            for t in ks_times
        ):
            errors.append("sweep.ks_times: entries must be positive numbers")

    for key in ("t_nodes", "x_nodes", "s_nodes"):
        nodes = data["ergodic"][key]
        if not isinstance(nodes, list) or not nodes:
            errors.append(f"ergodic.{key}: expected a non-empty list")
        elif any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in nodes):
            errors.append(f"ergodic.{key}: entries must be numbers")
        elif any(b <= a for a, b in zip(nodes, nodes[1:])):
            errors.append(f"ergodic.{key}: must be strictly increasing")
        elif key == "s_nodes" and nodes[0] <= 0:
            errors.append("ergodic.s_nodes: price nodes must be positive")

    opt = data["option"]
    if opt["kind"] not in OPTION_KINDS or opt["kind"] == "custom-bounded":
        kinds = ", ".join(k for k in OPTION_KINDS if k != "custom-bounded")
        errors.append(f"option.kind: must be one of {kinds}")
    _require_number(cfg.data, "option", "strike", errors, low=0)
    _require_number(cfg.data, "option", "cap", errors, low=0, strict_low=True, optional=True)
    if opt["cap"] is None:
        errors.append("option.cap: required (bounded payoffs only; 10 * s0 is a sane choice)")
    _require_number(cfg.data, "option", "maturity", errors, low=0, strict_low=True)
    _require_number(cfg.data, "option", "smoothing", errors, low=0, strict_low=True, optional=True)
    if not callable(opt["weight"]) and opt["weight"] not in WEIGHT_CATALOG:
        errors.append(
            f"option.weight: unknown weight {opt['weight']!r}; "
            f"catalog: {', '.join(sorted(WEIGHT_CATALOG))}"
        )
    if not isinstance(data["output"]["timing"], bool):
        errors.append("output.timing: expected true/false")

    if errors:
        raise ConfigError(sorted(errors))
    return cfg
