"""Run configuration: a versioned key-value tree read from YAML or JSON.

Example (all keys optional except ``experiment``)::

    version: 1
    experiment: toy-hierarchy      # toy-hierarchy | toy-regression | digits | custom
    seed: 0
    output_dir: runs/toy
    threads: 1
    data:
      path: null                   # dataset CSV for `custom` (or generated dataset)
      usps_path: null              # label + 256 pixels CSV for `digits`
    model:
      layer_dims: [5, 3]           # hidden dims, closest-to-data first
      num_inducing: 15
      groups: null                 # per-layer lists of output-column lists
    optimizer:
      max_iterations: 3000
      tolerance: 1.0e-7
      frozen_iterations: 50
      frozen_kinds: [kernel_variance, noise_variance]
      restarts: 3                  # 13 for toy-regression
      screen_iterations: 0         # 200 for toy-regression; 0 runs every restart in full
    evaluation:
      samples_per_level: 8
      perturbation_scale: 2.0
    sweep:
      max_depth: 5

Unknown keys are rejected at every level.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import yaml

CONFIG_VERSION = 1
EXPERIMENTS = ("toy-hierarchy", "toy-regression", "digits", "custom")


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "version": CONFIG_VERSION,
    "experiment": None,
    "seed": 0,
    "output_dir": "runs",
    "threads": 1,
    "data": {"path": None, "usps_path": None},
    "model": {"layer_dims": None, "num_inducing": None, "groups": None},
    "optimizer": {
        "max_iterations": 3000,
        "tolerance": 1e-7,
        "frozen_iterations": 50,
        "frozen_kinds": ["kernel_variance", "noise_variance"],
        "restarts": None,
        "screen_iterations": None,
    },
    "evaluation": {"samples_per_level": 8, "perturbation_scale": 2.0},
    "sweep": {"max_depth": 5},
}

_EXPERIMENT_OPTIMIZER_DEFAULTS = {
    "toy-hierarchy": {"restarts": 3, "screen_iterations": 0},
    "toy-regression": {"restarts": 13, "screen_iterations": 200},
    "digits": {"restarts": 3, "screen_iterations": 0},
    "custom": {"restarts": 3, "screen_iterations": 0},
}

_EXPERIMENT_MODEL_DEFAULTS = {
    "toy-hierarchy": {"layer_dims": [5, 3], "num_inducing": 15},
    "toy-regression": {"layer_dims": [1], "num_inducing": 20},
    "digits": {"layer_dims": [10, 8, 6, 4, 2], "num_inducing": 25},
    "custom": {"layer_dims": [2], "num_inducing": 20},
}


def _merge(defaults, given, path):
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        if key not in defaults:
            where = ".".join(path + [key])
            raise ConfigError(f"unknown configuration key '{where}'")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"'{'.'.join(path + [key])}' must be a mapping")
            out[key] = _merge(defaults[key], val, path + [key])
        else:
            out[key] = val
    return out


@dataclass
class RunConfig:
    tree: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a mapping")
        tree = _merge(_DEFAULTS, raw, [])
        if tree["version"] != CONFIG_VERSION:
            raise ConfigError(f"configuration version {tree['version']} is not supported (expected {CONFIG_VERSION})")
        if tree["experiment"] not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENTS)}, got {tree['experiment']!r}")
        for key, val in _EXPERIMENT_MODEL_DEFAULTS[tree["experiment"]].items():
            if tree["model"][key] is None:
                tree["model"][key] = copy.deepcopy(val)
        for key, val in _EXPERIMENT_OPTIMIZER_DEFAULTS[tree["experiment"]].items():
            if tree["optimizer"][key] is None:
                tree["optimizer"][key] = val
        cfg = cls(tree)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, data_path=None) -> "RunConfig":
        """Read a config file; ``data_path`` replaces ``data.path`` before validation."""
        with open(path) as fh:
            try:
                raw = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        raw = raw or {}
        if data_path is not None and isinstance(raw, dict):
            raw = {**raw, "data": {**(raw.get("data") or {}), "path": str(data_path)}}
        return cls.from_dict(raw)

    def validate(self):
        t = self.tree
        dims = t["model"]["layer_dims"]
        if not isinstance(dims, list) or not dims or not all(isinstance(q, int) and q >= 1 for q in dims):
            raise ConfigError(f"model.layer_dims must be a non-empty list of positive integers, got {dims!r}")
        K = t["model"]["num_inducing"]
        Ks = K if isinstance(K, list) else [K]
        if not all(isinstance(k, int) and k >= 1 for k in Ks):
            raise ConfigError(f"model.num_inducing must be a positive integer (or list), got {K!r}")
        if isinstance(K, list) and len(K) != self.depth_of_model():
            raise ConfigError("model.num_inducing list must have one entry per layer")
        opt = t["optimizer"]
        if not (isinstance(opt["max_iterations"], int) and opt["max_iterations"] >= 0):
            raise ConfigError("optimizer.max_iterations must be a non-negative integer")
        if not float(opt["tolerance"]) > 0:
            raise ConfigError("optimizer.tolerance must be positive")
        if not 0 <= opt["frozen_iterations"] <= opt["max_iterations"]:
            raise ConfigError("optimizer.frozen_iterations must lie in [0, max_iterations]")
        if not (isinstance(opt["restarts"], int) and opt["restarts"] >= 1):
            raise ConfigError("optimizer.restarts must be a positive integer")
        if not (isinstance(opt["screen_iterations"], int) and opt["screen_iterations"] >= 0):
            raise ConfigError("optimizer.screen_iterations must be a non-negative integer")
        if not (isinstance(t["seed"], int) and t["seed"] >= 0):
            raise ConfigError("seed must be a non-negative integer")
        if not (isinstance(t["threads"], int) and t["threads"] >= 1):
            raise ConfigError("threads must be a positive integer")
        if not (isinstance(t["sweep"]["max_depth"], int) and t["sweep"]["max_depth"] >= 1):
            raise ConfigError("sweep.max_depth must be a positive integer")
        if t["experiment"] == "custom" and not t["data"]["path"]:
            raise ConfigError("experiment 'custom' needs data.path")
        groups = t["model"]["groups"]
        if groups is not None and (not isinstance(groups, list) or len(groups) > len(dims)):
            raise ConfigError("model.groups must be a list with at most one entry per layer")

    def depth_of_model(self) -> int:
        extra = 1 if self.tree["experiment"] == "toy-regression" else 0
        return len(self.tree["model"]["layer_dims"]) + extra

    def __getitem__(self, key):
        return self.tree[key]

    def override(self, **kw) -> "RunConfig":
        """Apply CLI overrides such as ``seed=3`` or ``optimizer__restarts=1``."""
        raw = copy.deepcopy(self.tree)
        for key, val in kw.items():
            if val is None:
                continue
            node = raw
            parts = key.split("__")
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = val
        return RunConfig.from_dict(raw)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.tree)
