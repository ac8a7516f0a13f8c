"""Experiment configuration: YAML in, validated nested dict out.

Every key is checked against :data:`SCHEMA`; unknown keys and type errors
are reported with the line number of the offending key.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import yaml

from .noise_models import FAMILIES

EXPERIMENTS = ("noise-convergence", "robustness-sweep", "hjb-solve", "evaluate-cost", "validate", "lift")
SUITES = ("rough_core", "noise_models", "rde_solver", "policy", "hjb_solver", "cost_eval")
CRITERIA = ("discounted", "finite_horizon")
MODEL_NAMES = ("symmetric", "smooth", "constant", "uncontrolled")

_NUM = (int, float)
_OPT_NUM = (int, float, type(None))

# key -> (allowed types, default) or nested schema
SCHEMA: Dict[str, Any] = {
    "experiment": ((str,), "validate"),
    "seeds": ((list,), [0]),
    "output": ((str,), "out"),
    "model": {
        "name": ((str,), "symmetric"),
        "discount": (_NUM, 1.0),
        "box": (_NUM, 6.0),
        "cost_value": (_NUM, 1.0),
        "terminal_value": (_NUM, 0.0),
    },
    "noise": {
        "families": ((dict,), {"wong_zakai": [8, 32, 128, 512]}),
        "dim": ((int,), 1),
        "fine_factor": ((int,), 32),
        "quad_order": ((int,), 4),
        "hoelder_exponent": (_NUM, 0.4),
    },
    "grid": {
        "n_cells": ((int,), 1024),
        "horizon": (_NUM, 1.0),
    },
    "hjb": {
        "nx": ((int,), 601),
        "nu": ((int,), 41),
        "nt": ((int,), 50),
    },
    "policy": {
        "source": ((str,), "hjb"),
        "path": ((str, type(None)), None),
        "bandwidth": (_NUM, 0.2),
        "lipschitz_bound": (_OPT_NUM, None),
        "time_nodes": ((int,), 51),
        "check_pairs": ((int,), 10_000),
    },
    "evaluation": {
        "criteria": ((list,), ["discounted"]),
        "n_paths": ((int,), 1000),
        "x0": (_NUM, 1.0),
        "T_trunc": (_OPT_NUM, None),
        "tol": (_NUM, 1e-6),
        "steps_per_unit": ((int,), 1024),
        "horizon": (_NUM, 1.0),
        "chunk": ((int,), 1000),
    },
    "validate": {
        "suites": ((list,), list(SUITES)),
        "corrupt_chen": ((bool,), False),
    },
}


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


def _line_map(node, prefix: Tuple[str, ...] = (), out=None) -> Dict[Tuple[str, ...], int]:
    """Line (1-based) of every mapping key, addressed by its key path."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (str(k.value),)
            out[path] = k.start_mark.line + 1
            _line_map(v, path, out)
    return out


def _defaults(schema) -> dict:
    out = {}
    for k, spec in schema.items():
        out[k] = _defaults(spec) if isinstance(spec, dict) else copy.deepcopy(spec[1])
    return out


@dataclass
class ExperimentConfig:
    """Resolved configuration; ``data`` mirrors :data:`SCHEMA` with defaults filled in."""

    data: dict = field(default_factory=lambda: _defaults(SCHEMA))
    source: str = "<defaults>"

    def __getitem__(self, key):
        return self.data[key]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True, default_flow_style=None)


def _merge(schema, given, lines, path, source) -> dict:
    out = {}
    if not isinstance(given, dict):
        raise ConfigError(f"section {'.'.join(path) or 'top level'} must be a mapping",
                          lines.get(path), source)
    for k in given:
        if k not in schema:
            where = ".".join(path) or "top level"
            raise ConfigError(f"unknown key {k!r} in {where}", lines.get(path + (str(k),)), source)
    for k, spec in schema.items():
        kp = path + (k,)
        if isinstance(spec, dict):
            out[k] = _merge(spec, given.get(k, {}) or {}, lines, kp, source)
            continue
        types, default = spec
        if k not in given:
            out[k] = copy.deepcopy(default)
            continue
        v = given[k]
        ok = isinstance(v, types) and not (isinstance(v, bool) and bool not in types)
        if not ok:
            names = "/".join("null" if t is type(None) else t.__name__ for t in types)
            raise ConfigError(f"{'.'.join(kp)} must be {names}, got {type(v).__name__}",
                              lines.get(kp), source)
        out[k] = float(v) if (float in types and isinstance(v, int) and not isinstance(v, bool)) else v
    return out


def _check_values(d: dict, lines, source) -> None:
    def fail(path, msg):
        raise ConfigError(msg, lines.get(path), source)

    if d["experiment"] not in EXPERIMENTS:
        fail(("experiment",), f"experiment must be one of {EXPERIMENTS}")
    seeds = d["seeds"]
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and 0 <= s < 2 ** 64 for s in seeds):
        fail(("seeds",), "seeds must be a non-empty list of unsigned 64-bit integers")
    if d["model"]["name"] not in MODEL_NAMES:
        fail(("model", "name"), f"model.name must be one of {MODEL_NAMES}")
    fams = d["noise"]["families"]
    if not fams:
        fail(("noise", "families"), "noise.families must not be empty")
    for fam, levels in fams.items():
        p = ("noise", "families", str(fam))
        if fam not in FAMILIES:
            fail(p, f"unknown noise family {fam!r}; expected one of {FAMILIES}")
        if fam.startswith("brownian"):
            if levels not in (None, [], [None]):
                fail(p, f"{fam} takes no levels")
            fams[fam] = [None]
        elif not isinstance(levels, list) or not levels or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in levels):
            fail(p, f"levels of {fam} must be a non-empty list of numbers")
    crit = d["evaluation"]["criteria"]
    if not crit or any(c not in CRITERIA for c in crit):
        fail(("evaluation", "criteria"), f"evaluation.criteria must be a non-empty subset of {CRITERIA}")
    if d["policy"]["source"] not in ("hjb", "file"):
        fail(("policy", "source"), "policy.source must be 'hjb' or 'file'")
    if d["policy"]["source"] == "file" and not d["policy"]["path"]:
        fail(("policy", "path"), "policy.path is required when policy.source is 'file'")
    for key in ("n_cells",):
        if d["grid"][key] < 1:
            fail(("grid", key), f"grid.{key} must be positive")
    if d["evaluation"]["n_paths"] < 1:
        fail(("evaluation", "n_paths"), "evaluation.n_paths must be positive")
    suites = d["validate"]["suites"]
    if not suites:
        fail(("validate", "suites"), "validate.suites must not be empty")
    for s in suites:
        if s not in SUITES:
            fail(("validate", "suites"), f"unknown suite {s!r}; expected some of {SUITES}")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        given = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          None if mark is None else mark.line + 1, source) from None
    lines = _line_map(node) if node is not None else {}
    data = _merge(SCHEMA, given or {}, lines, (), source)
    _check_values(data, lines, source)
    return ExperimentConfig(data, source)


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return parse_config("", "<defaults>")
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, path) from None
    return parse_config(text, path)
