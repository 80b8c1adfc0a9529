"""JSON experiment configuration with defaults and dotted-path overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path

DEFAULT_CONFIG = {
    "seed": 0,
    "system": {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0, "dt": 0.025, "substeps": 32},
    "dataset": {"path": "data/lorenz.sdat", "trajectories": 1024, "length": 1024, "burn_in": 1024},
    "network": {"k": 2, "hidden_features": 128, "residual_blocks": 3, "time_embedding_dim": 16,
                "checkpoint": "model.sdck"},
    "training": {"epochs": 256, "batches_per_epoch": 64, "batch_size": 256, "learning_rate": 1e-3,
                 "weight_decay": 1e-3, "valid_size": 1024, "log": "train_log.csv", "resume": False},
    "observation": {"operator": {"name": "subsample", "stride": 8, "start": 0, "coords": [0]},
                    "noise_std": 0.05, "length": 65, "trajectory": 0,
                    "path": "obs.sdao", "truth": "truth.sdat"},
    "guidance": {"variant": "sda", "gamma": 1e-2},
    "sampler": {"steps": 256, "corrections": 0, "tau": 0.25, "samples": 256,
                "output": "posterior.sdat", "report": "assimilate_report"},
    "bpf": {"particles": 65536, "draws": 256, "output": "bpf.sdat"},
    "evaluation": {"w1_cap": 512, "report": "evaluation"},
}


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and key != "operator":
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = merge(out[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str):
    """``a.b.c=value`` with ``value`` read as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def set_path(config: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = config
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    # operator descriptors take free-form keys
    free = parts[:2] == ["observation", "operator"] and len(parts) > 2
    if not isinstance(node, dict) or (parts[-1] not in node and not free):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def load_config(path=None, overrides=()) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from err
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: the top level must be an object")
        config = merge(config, user)
    for key, value in overrides:
        set_path(config, key, value)
    validate(config)
    return config


def _positive(config, dotted, integer=True):
    node = config
    for part in dotted.split("."):
        node = node[part]
    kind = int if integer else (int, float)
    if isinstance(node, bool) or not isinstance(node, kind) or node <= 0:
        raise ConfigError(f"{dotted} must be a positive {'integer' if integer else 'number'}")


def validate(config: dict) -> None:
    if not isinstance(config["seed"], int) or config["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    for key in ("dataset.trajectories", "dataset.length", "dataset.burn_in", "network.k",
                "network.hidden_features", "network.residual_blocks", "network.time_embedding_dim",
                "training.epochs", "training.batches_per_epoch", "training.batch_size",
                "training.valid_size", "observation.length", "sampler.steps", "sampler.samples",
                "bpf.particles", "bpf.draws", "evaluation.w1_cap", "system.substeps"):
        _positive(config, key)
    for key in ("system.dt", "training.learning_rate", "observation.noise_std", "sampler.tau",
                "guidance.gamma"):
        _positive(config, key, integer=False)
    if not isinstance(config["sampler"]["corrections"], int) or config["sampler"]["corrections"] < 0:
        raise ConfigError("sampler.corrections must be a non-negative integer")
    if config["guidance"]["variant"] not in ("sda", "dps"):
        raise ConfigError("guidance.variant must be 'sda' or 'dps'")
    if config["bpf"]["particles"] < 2:
        raise ConfigError("bpf.particles must be at least 2")
    window = 2 * config["network"]["k"] + 1
    if config["dataset"]["length"] < window:
        raise ConfigError(f"dataset.length {config['dataset']['length']} is shorter than a "
                          f"window of {window} states (network.k={config['network']['k']})")
    if config["observation"]["length"] < window:
        raise ConfigError(f"observation.length {config['observation']['length']} is shorter than a "
                          f"window of {window} states (network.k={config['network']['k']})")
    if not isinstance(config["observation"]["operator"], dict) or "name" not in config["observation"]["operator"]:
        raise ConfigError("observation.operator must be a descriptor object with a 'name'")
    if config["observation"]["length"] > config["dataset"]["length"]:
        raise ConfigError("observation.length exceeds dataset.length")
