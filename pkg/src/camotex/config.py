"""Run configuration: YAML file merged over defaults, then ``--set`` overrides.

Every section below is a mapping; unknown keys are rejected so typos surface
as validation errors naming the field.
"""

from __future__ import annotations

import copy
import os

import yaml

OUTPUT_ROOT_ENV = "CAMOTEX_OUTPUT_ROOT"

DEFAULTS = {
    "seed": 0,
    "paths": {
        "mesh": None,        # prepared mesh (OBJ); the packaged car when unset
        "atlas": None,       # patch seeds and rectangles (JSON); packaged when unset
        "texture": None,     # texture input (PNG or NPY)
        "dataset": None,     # directory written by render-dataset
        "weights": None,     # detector weight file
        "output_root": None,  # parent of per-run directories; env or ./runs when unset
    },
    "uv": {"iterations": 100, "texture_size": 32, "heatmap_size": 256},
    "poses": {
        "distances": [8.0, 10.0, 14.0, 20.0],
        "low_polar_angles": [5.0, 10.0, 20.0, 30.0],
        "high_polar_angles": [45.0],
        "low_azimuth_step": 18.0,
        "high_azimuth_step": 45.0,
        "distance_scale": 0.1,
        "fov_y": 45.0,
        "width": 96,
        "height": 96,
        "target": [0.0, 0.06, 0.0],
    },
    "scenes": {"n_train": 9, "n_test": 1, "variants": True, "appearance_mix": [0.7, 0.0, 0.3]},
    "mask": {"c_t": 0.8, "c_n": 0.2},
    "eot": {"brightness": 0.08, "contrast": [0.85, 1.15], "noise_std": 0.02},
    "loss": {"beta": 1.0, "gamma": 0.5, "target_class": 0, "tau_attack": 0.5, "fallback_k": 1},
    "attack": {"lr": 0.015, "epochs": 5, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
               "optimizer": "adam", "eot_draws": 1, "shuffle": False, "dr_lighting": "scene",
               "use_eot": True},
    "victim": {"epochs": 12, "lr": 0.002, "batch": 16, "activation": "silu",
               "positive_weight": 1.0, "class_weight": 0.5, "box_weight": 2.0, "jitter": 0.1,
               "noise_std": 0.02, "flip": True},
    "eval": {"sweep_frames": 90, "sweep_distance": 10.0, "sweep_polar": 20.0, "random_seed": 1,
             "annotate": 6},
}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (update or {}).items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(name, "unknown configuration key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(name, "expected a mapping")
            out[key] = _merge(base[key], value, name + ".")
        else:
            out[key] = _coerce(name, base[key], value)
    return out


def _coerce(name, default, value):
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("true", "yes", "1"):
                    return True
                if value.lower() in ("false", "no", "0"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if not isinstance(value, (list, tuple)):
                raise ValueError(value)
            return [_coerce(name, default[0], v) if default else v for v in value]
        return type(default)(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"cannot interpret {value!r} as {type(default).__name__}") from None


def load_config(path) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError("config", f"file {path} does not exist")
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"invalid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    return data


def parse_override(text: str) -> dict:
    """``section.key=value`` with a YAML-parsed value."""
    if "=" not in text:
        raise ConfigError(text, "override must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    out = cur = {}
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return out


def resolve(file_cfg: dict, overrides=()) -> dict:
    cfg = _merge(DEFAULTS, file_cfg)
    for item in overrides:
        cfg = _merge(DEFAULTS, _deep_update(cfg, item))
    return cfg


def _deep_update(base, update):
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def dump(cfg: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True, default_flow_style=False)
