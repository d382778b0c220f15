"""Run configuration: defaults, JSON-schema validation, merging and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

from .compression import DistillConfig, PruneConfig
from .errors import ConfigError
from .models import ModelSpec
from .training import TrainConfig

DEFAULTS: dict = {
    "data": {"n": 800, "balance": [1 / 3, 1 / 3, 1 / 3], "seed": 1, "path": None},
    "model": {
        "head": "classifier",
        "attention": "cbam",
        "reduction": 4,
        "num_classes": 3,
        "detect_classes": 1,
        "image_size": 64,
        "grid": 8,
        "boxes_per_cell": 1,
        "teacher": {"stem": 16, "stages": [[16, 2], [32, 2], [64, 2]]},
        "student": {"stem": 8, "stages": [[8, 1], [16, 1], [32, 1]]},
    },
    "train": {
        "epochs": 20,
        "lr": 0.01,
        "lr_decay": 0.1,
        "decay_period": 5,
        "momentum": 0.9,
        "batch_size": 16,
        "smoothing": 0.1,
        "seed": 1,
        "clip_norm": None,
    },
    "prune": {"strategy": "magnitude", "threshold": None, "sparsity": 0.3, "l1": 1e-4, "finetune_epochs": 1, "seed": 1},
    "distill": {"temperature": 4.0, "alpha": 0.5, "blend": 0.7, "lr": 0.02, "epochs": 30, "momentum": 0.9},
    "eval": {"iou": 0.5, "score": 0.5, "ap_score": 0.01, "fps_iters": 50, "fps_warmup": 5, "fps_repeats": 5},
    "gan": {"target_class": 2, "k": 200, "steps": 300, "batch_size": 32, "lr": 0.0005, "hidden": 64, "seed": 1},
    "ablation": {"seeds": [1, 2, 3, 4, 5], "sparsity": 0.5},
}

_num = {"type": "number"}
_int = {"type": "integer"}
_stages = {"type": "array", "minItems": 1,
           "items": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2}}
_arch = {"type": "object", "additionalProperties": False,
         "properties": {"stem": {"type": "integer", "minimum": 1}, "stages": _stages}}


def _section(properties: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": properties}


SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "compresskit run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": _section({
            "n": {"type": "integer", "minimum": 1},
            "balance": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
            "seed": _int,
            "path": {"type": ["string", "null"]},
        }),
        "model": _section({
            "head": {"enum": ["classifier", "detector"]},
            "attention": {"enum": ["none", "cbam", "sam", "bam"]},
            "reduction": {"type": "integer", "minimum": 1},
            "num_classes": {"type": "integer", "minimum": 1},
            "detect_classes": {"type": "integer", "minimum": 1},
            "image_size": {"type": "integer", "minimum": 8},
            "grid": {"type": "integer", "minimum": 1},
            "boxes_per_cell": {"type": "integer", "minimum": 1},
            "teacher": _arch,
            "student": _arch,
        }),
        "train": _section({
            "epochs": {"type": "integer", "minimum": 0},
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "lr_decay": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "decay_period": {"type": "integer", "minimum": 1},
            "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "batch_size": {"type": "integer", "minimum": 1},
            "smoothing": {"type": "number", "minimum": 0, "maximum": 1},
            "seed": _int,
            "clip_norm": {"type": ["number", "null"], "exclusiveMinimum": 0},
        }),
        "prune": _section({
            "strategy": {"enum": ["none", "magnitude", "random", "sparse"]},
            "threshold": {"type": ["number", "null"], "minimum": 0},
            "sparsity": {"type": ["number", "null"], "minimum": 0, "exclusiveMaximum": 1},
            "l1": {"type": "number", "minimum": 0},
            "finetune_epochs": {"type": "integer", "minimum": 0},
            "seed": _int,
        }),
        "distill": _section({
            "temperature": {"type": "number", "exclusiveMinimum": 0},
            "alpha": {"type": "number", "minimum": 0, "maximum": 1},
            "blend": {"type": "number", "minimum": 0, "maximum": 1},
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "epochs": {"type": "integer", "minimum": 0},
            "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        }),
        "eval": _section({
            "iou": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "score": {"type": "number", "minimum": 0, "maximum": 1},
            "ap_score": {"type": "number", "minimum": 0, "maximum": 1},
            "fps_iters": {"type": "integer", "minimum": 1},
            "fps_warmup": {"type": "integer", "minimum": 0},
            "fps_repeats": {"type": "integer", "minimum": 1},
        }),
        "gan": _section({
            "target_class": {"type": "integer", "minimum": 0},
            "k": {"type": "integer", "minimum": 0},
            "steps": {"type": "integer", "minimum": 1},
            "batch_size": {"type": "integer", "minimum": 1},
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "hidden": {"type": "integer", "minimum": 1},
            "seed": _int,
        }),
        "ablation": _section({
            "seeds": {"type": "array", "items": _int, "minItems": 1},
            "sparsity": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        }),
    },
}


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None


def resolve(override: dict | None = None) -> dict:
    """Validate ``override`` and fill every missing field from the defaults."""
    override = override or {}
    validate(override)
    cfg = merge(DEFAULTS, override)
    validate(cfg)
    # construct the typed views once so range errors surface before any work
    try:
        train_config(cfg)
        prune_config(cfg)
        distill_config(cfg)
        model_specs(cfg)
    except ValueError as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return cfg


def load(path=None) -> dict:
    if path is None:
        return resolve({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    return resolve(raw)


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def model_specs(cfg: dict) -> tuple[ModelSpec, ModelSpec]:
    m = cfg["model"]
    common = {
        "attention": m["attention"],
        "reduction": m["reduction"],
        "head": m["head"],
        "num_classes": m["num_classes"] if m["head"] == "classifier" else m["detect_classes"],
        "grid": m["grid"],
        "boxes_per_cell": m["boxes_per_cell"],
        "image_size": m["image_size"],
    }
    teacher = ModelSpec(stem=m["teacher"]["stem"], stages=[list(s) for s in m["teacher"]["stages"]], **common)
    student = ModelSpec(stem=m["student"]["stem"], stages=[list(s) for s in m["student"]["stages"]], **common)
    teacher.validate()
    student.validate()
    return teacher, student


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def prune_config(cfg: dict, strategy: str | None = None) -> PruneConfig:
    p = dict(cfg["prune"])
    if strategy is not None:
        p["strategy"] = strategy
    return PruneConfig(**p)


def distill_config(cfg: dict) -> DistillConfig:
    return DistillConfig(**cfg["distill"])


def schema_json() -> str:
    return json.dumps(SCHEMA, indent=2) + "\n"
