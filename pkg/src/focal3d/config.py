"""The single JSON run configuration: schema, detector presets and overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from focal3d.errors import ConfigError
from focal3d.network.models import PRESET_NAMES

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_count = {"type": "integer", "minimum": 0}
_range = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_prob = {"type": "number", "minimum": 0, "maximum": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj({
    "detector": {"enum": list(PRESET_NAMES)},
    "seed": _count,
    "data": _obj({
        "root": {"type": "string"},
        "min_points": _count,
        "split_seed": _count,
        "max_frames": _count,
        "difficulty_rule": {"enum": ["kitti", "support", "auto"]},
    }),
    "voxel": _obj({"max_points": {"type": "integer", "minimum": 1}}),
    "loss": _obj({
        "gamma": _nonneg,
        "alpha": _pos,
        "beta": _pos,
        "eta": _pos,
        "lambda": _pos,
        "mode": {"enum": ["original", "enhanced"]},
        "cls_kind": {"enum": ["bce", "focal"]},
        "reg_kind": {"enum": ["square", "smooth_l1"]},
    }, required=("gamma",)),
    "train": _obj({
        "epochs_phase1": _count,
        "epochs_phase2": _count,
        "lr": _pos,
        "phase2_factor": _pos,
        "batch_size": {"type": "integer", "minimum": 1},
        "optimizer": {"enum": ["sgd"]},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": _nonneg,
        "grad_clip": _nonneg,
        "checkpoint_every": _count,
        "max_steps": _count,
        "pos_iou": _prob,
        "neg_iou": _prob,
        "eval_score_threshold": _prob,
        "nms_threshold": _prob,
        "eval_every": _count,
    }),
    "predict": _obj({
        "score_threshold": _prob,
        "nms_threshold": _prob,
        "top_k": {"type": "integer", "minimum": 1},
    }),
    "eval": _obj({
        "overlap_image": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "overlap_bev": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "overlap_3d": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "score_threshold": _prob,
        "points": {"enum": [11, 40]},
    }),
    "recipe": _obj({
        "n_objects": _range,
        "size_mean": {"type": "array", "items": _pos, "minItems": 3, "maxItems": 3},
        "size_std": {"type": "array", "items": _nonneg, "minItems": 3, "maxItems": 3},
        "points_per_object": _range,
        "clutter_points": _count,
        "ground_z": _num,
        "x_range": _range,
        "y_range": _range,
        "n_distractors": _range,
        "distractor_points": _range,
        "class_name": {"type": "string"},
    }),
    "analysis": _obj({
        "gammas": {"type": "array", "items": _nonneg, "minItems": 1},
        "ks": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 100}, "minItems": 1},
        "bins": {"type": "integer", "minimum": 2},
        "n_neg": _count,
        "n_pos": _count,
        "class_filter": {"enum": ["positive", "negative", "all"]},
    }),
}, required=("detector", "loss"))

# per-family classification weights (alpha, beta, eta)
LOSS_WEIGHTS = {"3dfcn": (1.0, 5.0, 10.0), "voxelnet": (1.0, 10.0, 0.5)}

DEFAULTS = {
    "seed": 0,
    "data": {"root": "data", "min_points": 10, "split_seed": 0, "max_frames": 0, "difficulty_rule": "auto"},
    "voxel": {"max_points": 35},
    "loss": {"lambda": 1.0, "mode": "enhanced", "cls_kind": "focal", "reg_kind": "smooth_l1"},
    "train": {
        "epochs_phase1": 30, "epochs_phase2": 30, "lr": 0.01, "phase2_factor": 0.1, "batch_size": 4,
        "optimizer": "sgd", "momentum": 0.9, "weight_decay": 0.0, "grad_clip": 10.0,
        "checkpoint_every": 1, "max_steps": 0, "pos_iou": 0.6, "neg_iou": 0.45,
        "eval_score_threshold": 0.05, "nms_threshold": 0.8, "eval_every": 1,
    },
    "predict": {"score_threshold": 0.5, "nms_threshold": 0.8, "top_k": 100},
    "eval": {"overlap_image": 0.7, "overlap_bev": 0.5, "overlap_3d": 0.5, "score_threshold": 0.05, "points": 11},
    "recipe": {},
    "analysis": {"gammas": [0.0, 0.5, 1.0, 2.0, 5.0], "ks": [1, 10, 20], "bins": 20,
                 "n_neg": 100_000, "n_pos": 1_000, "class_filter": "negative"},
}


def family_of(detector):
    return "3dfcn" if detector.startswith("3dfcn") else "voxelnet"


def default_config(detector="voxelnet-mini", gamma=2.0):
    """A complete configuration for ``detector`` with focal loss at ``gamma``."""
    cfg = copy.deepcopy(DEFAULTS)
    alpha, beta, eta = LOSS_WEIGHTS[family_of(detector)]
    cfg["detector"] = detector
    cfg["loss"].update({"gamma": gamma, "alpha": alpha, "beta": beta, "eta": eta})
    return cfg


def _error_keys(err):
    base = ".".join(str(p) for p in err.absolute_path)
    prefix = base + "." if base else ""
    if err.validator == "required":
        missing = [p for p in err.validator_value if p not in err.instance]
        return [prefix + m for m in missing]
    if err.validator == "additionalProperties":
        allowed = set(err.schema.get("properties", {}))
        return [prefix + k for k in err.instance if k not in allowed]
    return [base or "<root>"]


def validate(cfg):
    """Raise :class:`ConfigError` listing every offending dotted key."""
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        keys = []
        for e in errors:
            for k in _error_keys(e):
                if k not in keys:
                    keys.append(k)
        details = "; ".join(e.message for e in errors)
        raise ConfigError(f"invalid config ({', '.join(keys)}): {details}", keys)
    t = cfg.get("train", {})
    if "pos_iou" in t and "neg_iou" in t and t["neg_iou"] > t["pos_iou"]:
        raise ConfigError("train.neg_iou must not exceed train.pos_iou", ["train.neg_iou"])
    return cfg


def parse_override(text):
    """``key.path=value``; the value is read as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value", [text])
    key, _, raw = text.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(cfg, overrides):
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        key, value = parse_override(item) if isinstance(item, str) else item
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key}: {p} is not a section", [key])
        node[parts[-1]] = value
    return cfg


def resolve(cfg):
    """Validate, then fill defaults (family loss weights included)."""
    validate(cfg)
    out = default_config(cfg["detector"], cfg["loss"]["gamma"])
    for section, value in cfg.items():
        if isinstance(value, dict):
            out[section].update(value)
        else:
            out[section] = value
    validate(out)
    return out


def load_config(path=None, overrides=(), detector=None):
    """Read a JSON config file (or start from defaults) and apply ``--set`` overrides."""
    if path is not None:
        try:
            cfg = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})", ["<file>"]) from None
    else:
        cfg = default_config(detector or "voxelnet-mini")
    if detector is not None:
        cfg["detector"] = detector
    return resolve(apply_overrides(cfg, overrides))


def loss_config(cfg):
    from focal3d.losses import LossConfig

    return LossConfig.from_dict(cfg["loss"])


def train_config(cfg):
    from focal3d.train import TrainConfig

    return TrainConfig(loss=loss_config(cfg), seed=cfg["seed"], **cfg["train"])


def recipe(cfg):
    from focal3d.data import SceneRecipe

    return SceneRecipe.from_dict({**cfg.get("recipe", {}), "seed": cfg["seed"]})


def network_config(cfg):
    from dataclasses import replace

    from focal3d.network.models import preset

    return replace(preset(cfg["detector"]), max_points=cfg["voxel"]["max_points"])
