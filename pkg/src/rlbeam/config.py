"""Flat dotted-key experiment configuration.

A config file holds one ``key = value`` pair per line; ``#`` starts a comment.
Values are parsed as JSON when possible (numbers, lists, true/false/null),
``<x>pi`` / ``<x>*pi`` means x times pi, anything else is a string. Every key
has a default, listed in ``DEFAULTS``; unknown keys are rejected.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Optional

from .seeding import named_seed

TASKS = ("generate-scenario", "learn-beam", "learn-codebook", "evaluate", "export-patterns")
SEED_NAMES = ("geometry", "scenario", "agent", "sensing", "kmeans")

DEFAULTS: dict[str, Any] = {
    "task": "learn-beam",
    "seed": 0,
    # null means "derive from the master seed and the subsystem name"
    **{f"seed.{n}": None for n in SEED_NAMES},
    "array.M": 8,
    "array.r": 3,
    "array.spacing": 0.5,
    "array.sigma_d": 0.0,
    "array.sigma_p": 0.0,
    "array.file": None,
    "scenario.kind": "LOS",
    "scenario.K": 1,
    "scenario.spans": [[30.0, 150.0]],
    "scenario.n_paths": 5,
    "scenario.weak_power_db": [-25.0, -15.0],
    "scenario.gain_db": [-6.0, 0.0],
    "scenario.reflectors": [50.0, 130.0],
    "scenario.reflector_spread": 3.0,
    "scenario.nlos_power_db": [-3.0, 0.0],
    "scenario.file": None,
    "scenario.normalize": True,
    "agent.T": 5000,
    "agent.k": 1,
    "agent.gamma": 0.0,
    "agent.tau": 0.05,
    "agent.target_every": 1,
    "agent.batch_size": 1024,
    "agent.buffer_capacity": 8192,
    "agent.actor_lr": 1e-3,
    "agent.critic_lr": 1e-3,
    "agent.actor_weight_decay": 1e-2,
    "agent.critic_weight_decay": 1e-3,
    "agent.ou_theta": 0.15,
    "agent.ou_sigma0": math.pi / 4,
    "agent.ou_sigma_min": None,
    "agent.ou_horizon": 10000,
    "agent.learn_start": None,
    "agent.feedback_noise": 0.0,
    "agent.dtype": "float32",
    "codebook.N": 4,
    "codebook.S": 16,
    "codebook.rounds": 1,
    "codebook.iters_per_round": 10000,
    "codebook.subsample": 1.0,
    "codebook.saturation_window": 2000,
    "codebook.saturation_tol": 1e-3,
    "codebook.fine_tune_iters": 2000,
    "codebook.fine_tune_noise": None,
    "codebook.workers": 1,
    "evaluate.codebook": None,
    "patterns.points": 181,
    "out": "out",
}

_PATH_KEYS = ("array.file", "scenario.file", "evaluate.codebook")


class ConfigError(ValueError):
    pass


def parse_value(text: str) -> Any:
    text = text.strip()
    low = text.lower().replace(" ", "")
    if low.endswith("pi"):
        head = low[:-2].rstrip("*")
        try:
            return (float(head) if head not in ("", "+", "-") else float(head + "1")) * math.pi
        except ValueError:
            pass
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_text(text: str) -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, val = line.split("=", 1)
        values[key.strip()] = parse_value(val)
    return values


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    if path.suffix == ".json":
        doc = json.loads(text)
        # a run's metadata.json re-runs through its resolved "config" block
        return dict(doc.get("config", doc))
    return parse_text(text)


class ExperimentConfig:
    """Resolved experiment settings; ``cfg["agent.gamma"]`` style access."""

    def __init__(self, values: Optional[dict] = None):
        values = dict(values or {})
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        self.values = {**DEFAULTS, **values}
        self.validate()

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **kv) -> "ExperimentConfig":
        return ExperimentConfig({**self.values, **kv})

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def seed_for(self, name: str) -> int:
        explicit = self.values.get(f"seed.{name}")
        return int(explicit) if explicit is not None else named_seed(int(self["seed"]), name)

    def resolved(self) -> dict:
        out = dict(self.values)
        for n in SEED_NAMES:
            out[f"seed.{n}"] = self.seed_for(n)
        return out

    def validate(self) -> None:
        v = self.values
        if v["task"] not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {v['task']!r}")
        for key in ("array.M", "array.r", "codebook.N", "agent.T", "scenario.K", "codebook.S"):
            if not isinstance(v[key], int) or isinstance(v[key], bool) or v[key] < 1:
                raise ConfigError(f"{key} must be a positive integer")
        if not isinstance(v["seed"], int):
            raise ConfigError("seed must be an integer")
        for key in ("array.sigma_d", "array.sigma_p"):
            if not isinstance(v[key], (int, float)) or v[key] < 0:
                raise ConfigError(f"{key} must be a nonnegative number")
        if str(v["scenario.kind"]).upper() not in ("LOS", "NLOS"):
            raise ConfigError("scenario.kind must be LOS or NLOS")
        for key in _PATH_KEYS:
            if v[key] is not None and not Path(v[key]).exists():
                raise ConfigError(f"{key}: file {v[key]} does not exist")
        if v["task"] in ("evaluate", "export-patterns") and v["evaluate.codebook"] is None:
            raise ConfigError(f"task {v['task']} needs evaluate.codebook")


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    values = read_config_file(path) if path else {}
    values.update(overrides or {})
    return ExperimentConfig(values)
