"""Experiment configuration: defaults, JSON schema and validated loading.

A config is a JSON document layered over :data:`DEFAULTS`.  Every object in
the schema is closed (unknown keys are rejected).  Validation errors carry the
line of the offending key in the source file.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import MISSING, fields
from importlib import resources
from pathlib import Path

import jsonschema

from .lif import RESET_MODES
from .plant import TASK_KINDS, PlantConfig, TaskSpec
from .policy import ModelConfig
from .trainer import TrainConfig

EXPERIMENTS = ("smoothing", "sparsity", "decoupling", "multistep", "reflex", "rhythm", "systolic", "attention")
ARTIFACTS = ("activity", "attention", "kinematic_map")
SCHEMA_FILE = "config.schema.json"


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, source: str = "<config>", line: int | None = None):
        self.source, self.line = source, line
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


# ------------------------------------------------------------------ defaults

# compact model shared by the end-to-end experiments; every run fits on CPU
EXPERIMENT_MODEL = {
    "K": 4,
    "D": 16,
    "n_hidden": 64,
    "gru_hidden": 32,
    "history": 6,
    "bias": False,
    "window_encoding": "increment",
}
SHAKE_TASK = {"kind": "shake", "episode_ticks": 44}
# the proprioceptive window spans a full shake period
RHYTHM_MODEL = {**EXPERIMENT_MODEL, "history": 13}
RHYTHM_OPTIM = {"epochs": 60, "batch_episodes": 32, "lr": 3e-3}

DEFAULTS: dict = {
    "seeds": [0, 1, 2, 3, 4],
    "workers": 1,
    "plant": {},
    "train": {
        "model": {},
        "optim": {},
        "demos": {
            "tasks": [
                {"kind": "reach"},
                {"kind": "static_hold"},
                {"kind": "shake", "episode_ticks": 44},
                {"kind": "static_pose_dynamic_gripper"},
                {"kind": "collision_course"},
            ],
            "n": 300,
            "tremor": True,
            "freeze_prob": 0.0,
        },
    },
    "experiments": {
        "smoothing": {
            "model": {**EXPERIMENT_MODEL, "n_hidden": 128, "lif_window": 8},
            "optim": {"epochs": 30, "batch_episodes": 32, "lr": 3e-3},
            "task": {"kind": "reach", "noise_sigma": 0.3},
            "n_demos": 96,
            "n_eval": 32,
            "thresholds": {"maj_reduction": 0.5, "maca_reduction": 0.25},
        },
        "sparsity": {
            "model": RHYTHM_MODEL,
            "optim": RHYTHM_OPTIM,
            "task": SHAKE_TASK,
            "n_demos": 64,
            "freeze_prob": 0.5,
            "n_eval": 4,
            "thresholds": {"max_rate_ratio": 0.5},
        },
        "decoupling": {
            "model": RHYTHM_MODEL,
            "optim": {"epochs": 40, "batch_episodes": 32, "lr": 3e-3},
            "task": {"kind": "static_pose_dynamic_gripper"},
            "n_demos": 64,
            "n_eval": 8,
            "thresholds": {"min_gripper_match": 0.9, "max_drift": 0.01, "min_gripper_selectivity": 0.0},
        },
        "multistep": {
            "model": {**EXPERIMENT_MODEL, "lif_beta": 0.98},
            "optim": {"epochs": 150, "batch_episodes": 32, "lr": 3e-3},
            "task": {"kind": "delayed_cue", "episode_ticks": 20},
            "n_demos": 64,
            "n_eval": 20,
            "thresholds": {"chance": 0.5, "single_step_max_margin": 0.1, "multi_step_min_margin": 0.3},
        },
        "reflex": {
            "task": {"kind": "collision_course", "episode_ticks": 60},
            "cortical_delay": 10,
            "thresholds": {"reflex_latency": 1, "cortical_min_latency": 10},
        },
        "rhythm": {
            "model": RHYTHM_MODEL,
            "optim": RHYTHM_OPTIM,
            "task": SHAKE_TASK,
            "n_demos": 64,
            "freeze_prob": 0.5,
            "freeze_at": 22,
            "n_eval": 4,
            "thresholds": {"cycles": 3, "period_tolerance": 1},
        },
        "systolic": {
            "model": EXPERIMENT_MODEL,
            "array": {"rows": 4, "cols": 8, "clock_hz": 20e6, "energy_per_cycle": 0.87e-3 / 43_800},
            "calibration_window": 4,
            "trace_task": {"kind": "static_pose_dynamic_gripper"},
            "thresholds": {"latency_s": 2.19e-3, "energy_j": 0.87e-3, "rel_tol": 0.005},
        },
        "attention": {
            "K": 1,
            "D": 16,
            "d_feat": 32,
            "n_objects": 8,
            "n_layers": 4,
            "layer_range": [3, 4],
            "n_train": 256,
            "n_test": 200,
            "epochs": 1500,
            "lr": 1e-2,
            "thresholds": {"min_mass": 0.6, "min_fraction": 0.9},
        },
    },
    "export": {"task": {"kind": "shake", "episode_ticks": 44}, "ticks": 10, "kinematic_tasks": [
        {"kind": "reach"},
        {"kind": "static_pose_dynamic_gripper"},
    ], "scene_seed": 0},
}


def deep_merge(base: dict, override: dict) -> dict:
    """Recursive dict update; lists and scalars in ``override`` replace."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# -------------------------------------------------------------------- schema


def _json_type(value) -> dict:
    if isinstance(value, bool):
        return {"type": "boolean"}
    if isinstance(value, int):
        return {"type": "integer"}
    if isinstance(value, float):
        return {"type": "number"}
    if isinstance(value, str):
        return {"type": "string"}
    if isinstance(value, (tuple, list)):
        item = _json_type(value[0]) if value else {}
        if item.get("type") == "integer":
            item = {"type": "number"} if any(isinstance(x, float) for x in value) else item
        return {"type": "array", "items": item}
    if isinstance(value, dict):
        return {"type": "object"}
    raise TypeError(f"no schema for {value!r}")


def _closed(properties: dict, required=()) -> dict:
    d = {"type": "object", "properties": properties, "additionalProperties": False}
    if required:
        d["required"] = list(required)
    return d


def _dataclass_schema(cls, enums: dict | None = None) -> dict:
    props = {}
    for f in fields(cls):
        default = f.default if f.default is not MISSING else f.default_factory()
        props[f.name] = _json_type(default)
        if enums and f.name in enums:
            props[f.name]["enum"] = list(enums[f.name])
    return _closed(props)


NUMBER3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
NUMBER6 = {"type": "array", "items": {"type": "number"}, "minItems": 6, "maxItems": 6}


def task_schema() -> dict:
    props = {}
    for f in fields(TaskSpec):
        if f.name == "kind":
            props["kind"] = {"type": "string", "enum": list(TASK_KINDS)}
        elif f.name in ("start_pose", "target"):
            props[f.name] = {"oneOf": [NUMBER6, {"type": "null"}]}
        elif f.name == "obstacle":
            props[f.name] = {"oneOf": [_closed({"point": NUMBER3, "normal": NUMBER3, "stiffness": {"type": "number"}},
                                               ["point", "normal"]), {"type": "null"}]}
        elif f.name == "cue":
            props[f.name] = {"oneOf": [{"type": "integer", "enum": [-1, 1]}, {"type": "null"}]}
        else:
            props[f.name] = _json_type(f.default)
    return _closed(props, ["kind"])


def build_schema() -> dict:
    model = _dataclass_schema(
        ModelConfig,
        {"readout": ("last", "mean"), "reset_mode": RESET_MODES, "gate_mode": ("channel", "scalar", "open"),
         "cortex": ("scripted", "qformer"), "window_encoding": ("absolute", "increment")},
    )
    optim = _dataclass_schema(TrainConfig)
    task = task_schema()
    tasks = {"type": "array", "items": task, "minItems": 1}
    count = {"type": "integer", "minimum": 1}
    prob = {"type": "number", "minimum": 0, "maximum": 1}

    def thresholds(*names):
        return _closed({n: {"type": "number"} for n in names})

    trained = {"model": model, "optim": optim, "task": task, "n_demos": count, "n_eval": count}
    experiments = {
        "smoothing": _closed({**trained, "thresholds": thresholds("maj_reduction", "maca_reduction")}),
        "sparsity": _closed({**trained, "freeze_prob": prob, "thresholds": thresholds("max_rate_ratio")}),
        "decoupling": _closed({**trained, "thresholds": thresholds("min_gripper_match", "max_drift", "min_gripper_selectivity")}),
        "multistep": _closed({**trained, "thresholds": thresholds("chance", "single_step_max_margin", "multi_step_min_margin")}),
        "reflex": _closed({"task": task, "cortical_delay": {"type": "integer", "minimum": 0},
                           "thresholds": thresholds("reflex_latency", "cortical_min_latency")}),
        "rhythm": _closed({**trained, "freeze_prob": prob, "freeze_at": {"type": "integer", "minimum": 0},
                           "thresholds": thresholds("cycles", "period_tolerance")}),
        "systolic": _closed({
            "model": model,
            "array": _closed({"rows": count, "cols": count, "clock_hz": {"type": "number", "exclusiveMinimum": 0},
                              "energy_per_cycle": {"type": "number", "minimum": 0}}),
            "calibration_window": count,
            "trace_task": task,
            "thresholds": thresholds("latency_s", "energy_j", "rel_tol"),
        }),
        "attention": _closed({
            "K": count, "D": count, "d_feat": {"type": "integer", "minimum": 3}, "n_objects": {"type": "integer", "minimum": 2},
            "n_layers": count, "layer_range": {"type": "array", "items": count, "minItems": 2, "maxItems": 2},
            "n_train": count, "n_test": count, "epochs": {"type": "integer", "minimum": 0},
            "lr": {"type": "number", "exclusiveMinimum": 0}, "thresholds": thresholds("min_mass", "min_fraction"),
        }),
    }
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "neuromotor experiment config",
        **_closed({
            "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
            "workers": count,
            "plant": _dataclass_schema(PlantConfig),
            "train": _closed({
                "model": model,
                "optim": optim,
                "demos": _closed({"tasks": tasks, "n": count, "tremor": {"type": "boolean"}, "freeze_prob": prob}),
            }),
            "experiments": _closed(experiments),
            "export": _closed({"task": task, "ticks": count, "kinematic_tasks": tasks, "scene_seed": {"type": "integer", "minimum": 0}}),
        }),
    }


def published_schema() -> dict:
    """The schema file shipped with the package."""
    return json.loads(resources.files(__package__).joinpath(SCHEMA_FILE).read_text())


# ------------------------------------------------------------------- loading

_WS = re.compile(r"[ \t\n\r]*")


def key_lines(text: str) -> dict:
    """Map each JSON path (tuple of keys / indices) to the 1-based line where it starts."""
    out: dict = {}
    decoder = json.JSONDecoder()

    def skip(i):
        return _WS.match(text, i).end()

    def line(i):
        return text.count("\n", 0, i) + 1

    def value(i, path):
        i = skip(i)
        out.setdefault(path, line(i))
        c = text[i]
        if c == "{":
            i = skip(i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                key_pos = i
                key, i = json.decoder.scanstring(text, i + 1)
                out[path + (key,)] = line(key_pos)
                i = skip(i) + 1  # ':'
                i = skip(value(i, path + (key,)))
                if text[i] == ",":
                    i = skip(i + 1)
                    continue
                return i + 1
        if c == "[":
            i = skip(i + 1)
            if text[i] == "]":
                return i + 1
            k = 0
            while True:
                i = skip(value(i, path + (k,)))
                k += 1
                if text[i] == ",":
                    i = skip(i + 1)
                    continue
                return i + 1
        _, end = decoder.raw_decode(text, i)
        return end

    value(0, ())
    return out


def parse(text: str, source: str = "<config>") -> dict:
    """Parse and validate a config document; returns the merged config."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", source, exc.lineno) from exc
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a JSON object", source, 1)
    validator = jsonschema.Draft202012Validator(published_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        path = owner = tuple(err.absolute_path)
        lines = key_lines(text)
        msg = err.message
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            if extra:
                path = path + (extra[0],)
                msg = f"unknown key {extra[0]!r}"
        line = lines.get(path)
        while line is None and path:
            path = path[:-1]
            line = lines.get(path)
        dotted = ".".join(map(str, owner)) or "<root>"
        raise ConfigError(f"{dotted}: {msg}", source, line)
    merged = deep_merge(DEFAULTS, doc)
    _check_semantics(merged, source)
    return merged


def _check_semantics(cfg: dict, source: str) -> None:
    try:
        for t in cfg["train"]["demos"]["tasks"]:
            TaskSpec.from_dict(t)
        ModelConfig.from_dict(cfg["train"]["model"])
        TrainConfig.from_dict(cfg["train"]["optim"])
        PlantConfig(**cfg["plant"])
        for name, sec in cfg["experiments"].items():
            for key in ("task", "trace_task"):
                if key in sec:
                    TaskSpec.from_dict(sec[key])
            if "model" in sec:
                ModelConfig.from_dict(sec["model"])
            if "optim" in sec:
                TrainConfig.from_dict(sec["optim"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), source) from exc


def load(path: str | Path | None) -> dict:
    """Load ``path`` (``None`` gives the defaults)."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror or exc}", str(p)) from exc
    return parse(text, str(p))
