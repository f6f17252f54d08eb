"""Run configuration: JSON schema, validation and construction of library objects."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import jsonschema

from .denoiser import BiasFreeCNNConfig, PretrainConfig
from .operators import KINDS
from .solver import PRESET_NAMES, STOP_MODES, SolverConfig, config_preset
from .trainer import BUILTIN_TASKS, TaskSpec, TrainConfig, WeightScheme, builtin_task


class ConfigError(ValueError):
    pass


_SOLVER = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"enum": list(PRESET_NAMES)},
        "sigma0": {"type": "number", "minimum": 0},
        "sigmaL": {"type": "number", "minimum": 0},
        "h0": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "max_iters": {"type": "integer", "minimum": 1},
        "stop_mode": {"enum": list(STOP_MODES)},
    },
}

_TASK = {
    "oneOf": [
        {"enum": list(BUILTIN_TASKS)},
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"type": "string", "minLength": 1},
                "mode": {"enum": ["iterative", "oneshot_denoise"]},
                "kind": {"enum": list(KINDS)},
                "params": {"type": "object"},
                "solver": _SOLVER,
                "sigma_range": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 255},
                                "minItems": 2, "maxItems": 2},
            },
        },
    ]
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "train": {"type": "string"},
                "test": {"type": "string"},
                "crop_size": {"type": "integer", "minimum": 2},
                "flips": {"type": "boolean"},
                "rotations": {"type": "boolean"},
                "max_test_images": {"type": "integer", "minimum": 1},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "depth": {"type": "integer", "minimum": 2},
                "channels": {"type": "integer", "minimum": 1},
                "kernel_size": {"type": "integer", "minimum": 1},
                "input_channels": {"enum": [1, 3]},
                "init_seed": {"type": "integer", "minimum": 0},
                "checkpoint": {"type": "string"},
            },
        },
        "tasks": {"type": "array", "items": _TASK, "minItems": 1},
        "pretrain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "sigma_range": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 255},
                                "minItems": 2, "maxItems": 2},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "first_cycle": {"type": "integer", "minimum": 1},
                "cycle": {"type": "integer", "minimum": 1},
                "loss": {"enum": ["mse", "l1"]},
                "precision": {"enum": ["float32", "float64"]},
            },
        },
        "weights": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["uniform", "fixed", "normalised"]},
                "fixed": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
                "prior_losses": {"type": "object", "additionalProperties": {"type": "number", "exclusiveMinimum": 0}},
                "denoise_losses": {"type": "object", "additionalProperties": {"type": "number", "exclusiveMinimum": 0}},
                "calibrate": {"type": "boolean"},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tasks": {"type": "array", "items": _TASK},
                "settings": {"type": "object", "additionalProperties": {
                    "oneOf": [{"type": "null"}, {"enum": list(PRESET_NAMES)}, _SOLVER]}},
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "sigmas": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 255}},
                "baseline": {"type": "string"},
            },
        },
    },
}


def _path(error: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in error.absolute_path) or "<root>"


def validate(config: dict) -> dict:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(f"{_path(e)}: {e.message}" for e in errors))
    return config


def load_config(path) -> dict:
    try:
        config = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    validate(config)
    config["_base_dir"] = str(Path(path).resolve().parent)
    config["_sha256"] = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return config


def resolve_path(config: dict, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else Path(config.get("_base_dir", ".")) / p


def solver_config(entry, default: SolverConfig | None = None) -> SolverConfig:
    if isinstance(entry, str):
        return config_preset(entry)
    entry = dict(entry or {})
    base = config_preset(entry.pop("preset")) if "preset" in entry else (default or SolverConfig())
    try:
        return base.with_overrides(**entry)
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from None


def task_spec(entry) -> TaskSpec:
    try:
        if isinstance(entry, str):
            return builtin_task(entry)
        name = entry["name"]
        mode = entry.get("mode", "oneshot_denoise" if name == "denoise" and "kind" not in entry else "iterative")
        if mode == "oneshot_denoise":
            return TaskSpec(name, "oneshot_denoise", sigma_range=tuple(entry.get("sigma_range", (0.0, 100.0))))
        if "kind" in entry:
            cfg = solver_config(entry.get("solver", {}), config_preset("medium"))
            return TaskSpec(name, "iterative", entry["kind"], dict(entry.get("params", {})), cfg)
        base = builtin_task(name)
        cfg = solver_config(entry.get("solver", {}), base.solver_config)
        return TaskSpec(name, "iterative", base.kind, dict(entry.get("params", {})), cfg)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"tasks: {exc}") from None


def _task_list(source) -> list[TaskSpec]:
    specs = [task_spec(e) for e in source]
    names = [t.name for t in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"tasks: duplicate task names {names}")
    return specs


def tasks(config: dict) -> list[TaskSpec]:
    return _task_list(config.get("tasks", ["inpaint", "sr2", "sensing"]))


def eval_tasks(config: dict) -> list[TaskSpec]:
    source = config.get("eval", {}).get("tasks")
    return tasks(config) if source is None else _task_list(source)


def model_config(config: dict) -> BiasFreeCNNConfig:
    m = {k: v for k, v in config.get("model", {}).items() if k != "checkpoint"}
    try:
        cfg = BiasFreeCNNConfig(**m)
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    return cfg


def pretrain_config(config: dict, seed: int) -> PretrainConfig:
    p = dict(config.get("pretrain", {}))
    if "sigma_range" in p:
        p["noise_range"] = tuple(p.pop("sigma_range"))
    return PretrainConfig(seed=seed, **p)


def train_config(config: dict, seed: int) -> TrainConfig:
    t = dict(config.get("train", {}))
    ds = config.get("dataset", {})
    if "loss" in t:
        t["loss_kind"] = t.pop("loss")
    try:
        return TrainConfig(crop_size=ds.get("crop_size", 96), flips=ds.get("flips", True),
                           rotations=ds.get("rotations", True), seed=seed, **t)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


def weight_scheme(config: dict) -> WeightScheme:
    w = dict(config.get("weights", {}))
    w.pop("calibrate", None)
    if "denoise_losses" in w:
        try:
            w["denoise_losses"] = {float(k): v for k, v in w["denoise_losses"].items()}
        except ValueError:
            raise ConfigError("weights/denoise_losses: keys must be noise levels") from None
    try:
        return WeightScheme(**w)
    except ValueError as exc:
        raise ConfigError(f"weights: {exc}") from None


def eval_settings(config: dict) -> dict[str, SolverConfig | None]:
    settings = config.get("eval", {}).get("settings", {"task": None})
    return {name: None if entry is None else solver_config(entry) for name, entry in settings.items()}
