"""Experiment configuration: a typed key-value document with dotted sections.

Configs are TOML (``[defender]`` tables or ``defender.kappa = 1.5`` keys)
or the JSON snapshot a run writes. Every key has a type and a default;
unknown sections or keys are errors.
"""
import copy
import json
import sys
from dataclasses import dataclass

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ParameterError, ParseError
from .neural import HIDDEN

DEFENDERS = ("none", "bngp", "fixed-lrt", "adaptive-lrt", "dp", "dp-matched", "laplace")
ATTACKERS = ("bgp", "fixed-lrt", "adaptive-lrt", "optimal-lrt", "score")
DATASETS = ("synthetic", "csv", "bitflip", "random-discrete")
PRIORS = ("bernoulli", "fixed-size")

# section -> key -> (type, default); "floats"/"ints"/"strs" are lists
SCHEMA = {
    "run": {
        "name": ("str", "experiment"),
        "seeds": ("ints", [0]),
        "output_dir": ("str", "runs"),
        "kappas": ("floats", []),
        "eval_samples": ("int", 500),
        "gamma": ("float", 0.5),
        "write_roc": ("bool", True),
    },
    "dataset": {
        "kind": ("str", "synthetic"),
        "K": ("int", 40),
        "m": ("int", 100),
        "aaf_low": ("float", 0.05),
        "aaf_high": ("float", 0.95),
        "seed": ("int", 1),
        "path": ("str", ""),
        "reference_rows": ("int", 0),
        "reference_panel": ("int", 100),
        "flip": ("float", 0.25),
        "n_outputs": ("int", 4),
        "encoding": ("str", "auto"),
    },
    "prior": {
        "kind": ("str", "bernoulli"),
        "p": ("float", 0.5),
        "size": ("int", 1),
    },
    "defender": {
        "kinds": ("strs", ["bngp"]),
        "kappa": ("float", 1.5),
        "kappa_active_fraction": ("float", 1.0),
        "mode": ("str", "preference"),
        "budget": ("float", 0.0),
        "penalty": ("float", 100.0),
        "norm_order": ("float", 1.0),
        "hidden": ("ints", [128, 128, 64]),
        "hidden_activation": ("str", "leaky_relu"),
        "batch_norm": ("bool", True),
        "aux_dim": ("int", 100),
        "rounds": ("int", 1500),
        "attacker_steps": ("int", 5),
        "batch_size": ("int", 128),
        "learning_rate": ("float", 1e-3),
        "weight_decay": ("float", 1e-5),
        "decay_rate": ("float", 0.988),
        "rounds_per_epoch": ("int", 20),
        "epsilon": ("float", 1.0),
        "laplace_scale": ("float", 0.1),
        "lrt_N": ("int", 10),
        "noise_samples": ("int", 2000),
    },
    "discriminator": {
        "hidden": ("ints", [256, 128]),
        "hidden_activation": ("str", "leaky_relu"),
        "batch_norm": ("bool", True),
        "batch_size": ("int", 128),
        "learning_rate": ("float", 1e-3),
        "weight_decay": ("float", 1e-5),
        "decay_rate": ("float", 0.988),
    },
    "attacker": {
        "kinds": ("strs", ["bgp", "fixed-lrt", "score"]),
        "hidden": ("ints", [256, 128]),
        "hidden_activation": ("str", "leaky_relu"),
        "batch_norm": ("bool", False),
        "steps": ("int", 1500),
        "batch_size": ("int", 128),
        "learning_rate": ("float", 1e-3),
        "weight_decay": ("float", 1e-5),
        "decay_rate": ("float", 0.988),
        "steps_per_epoch": ("int", 100),
        "lrt_N": ("int", 10),
        "calibration_trials": ("int", 200),
    },
    "sweep": {
        "widths": ("ints", [4, 16, 64]),
        "depth": ("int", 1),
        "steps": ("int", 3000),
        "batch_size": ("int", 512),
        "learning_rate": ("float", 1e-3),
        "decay_rate": ("float", 0.95),
    },
}


def _coerce(value, kind, where):
    def bad():
        return ParameterError(f"{where}: expected {kind}, got {value!r}")
    if kind == "bool":
        if not isinstance(value, bool):
            raise bad()
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise bad()
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad()
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad()
        return float(value)
    if not isinstance(value, list):
        raise bad()
    return [_coerce(v, kind[:-1], where) for v in value]


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved configuration; ``sections[name][key]`` holds every schema key."""

    sections: dict

    def __getitem__(self, section):
        return self.sections[section]

    def snapshot(self):
        return copy.deepcopy(self.sections)

    def to_json(self):
        return json.dumps(self.sections, indent=2, sort_keys=True) + "\n"

    @property
    def discrete(self):
        return self.sections["dataset"]["kind"] in ("bitflip", "random-discrete")

    @property
    def kappas(self):
        return self.sections["run"]["kappas"] or [self.sections["defender"]["kappa"]]


def build_config(document):
    """Validate a nested dict against the schema and fill defaults."""
    if not isinstance(document, dict):
        raise ParameterError("config must be a table of sections")
    unknown = sorted(set(document) - set(SCHEMA))
    if unknown:
        raise ParameterError(f"unknown config section(s): {', '.join(unknown)}")
    sections = {}
    for name, keys in SCHEMA.items():
        given = document.get(name, {})
        if not isinstance(given, dict):
            raise ParameterError(f"section [{name}] must be a table")
        extra = sorted(set(given) - set(keys))
        if extra:
            raise ParameterError(f"unknown key(s) in [{name}]: {', '.join(extra)}")
        sections[name] = {k: _coerce(given[k], kind, f"{name}.{k}") if k in given else copy.deepcopy(default)
                          for k, (kind, default) in keys.items()}
    _check(sections)
    return ExperimentConfig(sections)


def _check(s):
    if not s["run"]["seeds"]:
        raise ParameterError("run.seeds must be non-empty")
    if not 0 < s["run"]["gamma"] <= 1:
        raise ParameterError("run.gamma must lie in (0, 1]")
    if s["run"]["eval_samples"] < 2:
        raise ParameterError("run.eval_samples must be >= 2")
    for key, allowed in (("dataset.kind", DATASETS), ("prior.kind", PRIORS)):
        sec, k = key.split(".")
        if s[sec][k] not in allowed:
            raise ParameterError(f"{key} must be one of {allowed}")
    for sec, allowed in (("defender", DEFENDERS), ("attacker", ATTACKERS)):
        bad = [v for v in s[sec]["kinds"] if v not in allowed]
        if bad or not s[sec]["kinds"]:
            raise ParameterError(f"{sec}.kinds must be a non-empty subset of {allowed}")
    for sec in ("defender", "discriminator", "attacker"):
        if s[sec]["hidden_activation"] not in HIDDEN:
            raise ParameterError(f"{sec}.hidden_activation must be one of {HIDDEN}")
    if not 0 < s["defender"]["kappa_active_fraction"] <= 1:
        raise ParameterError("defender.kappa_active_fraction must lie in (0, 1]")
    if s["dataset"]["kind"] == "csv" and not s["dataset"]["path"]:
        raise ParameterError("dataset.kind = 'csv' needs dataset.path")
    discrete = s["dataset"]["kind"] in ("bitflip", "random-discrete")
    if discrete and s["defender"]["kinds"] != ["none"]:
        raise ParameterError("discrete datasets are their own release; use defender.kinds = ['none']")
    if not discrete and "optimal-lrt" in s["attacker"]["kinds"]:
        raise ParameterError("optimal-lrt needs an enumerable discrete dataset")
    if discrete and {"fixed-lrt", "adaptive-lrt", "score"} & set(s["attacker"]["kinds"]):
        raise ParameterError("LRT and score attacks need genotype records (a synthetic or csv dataset)")


def load_config(path):
    """Read a TOML config or a JSON snapshot (chosen by the ``.json`` suffix)."""
    path = str(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.endswith(".json"):
            document = json.loads(raw.decode("utf-8"))
        else:
            document = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return build_config(document)
