"""Run configuration: defaults < config file < command-line flags."""
from __future__ import annotations

import configparser
import os
from pathlib import Path

from .errors import UsageError

DEFAULT_OUT_ROOT = "runs"

ENV = {
    "env": "beacon",
    "width": 84,
    "height": 84,
    "n_actions": 5,
    "n_beacons": 1,
    "beacon_size": 6,
}

TRAIN = {
    "learning_rate": 1e-5,
    "batch_size": 16,
    "epochs": 50,
    "seeds": [42, 13, 62],
    "lambda_e": 1.0,
    "lambda_avg": 0.3,
    "lambda_smooth": 1.0,
    "lambda_l2": 0.01,
    "hidden": 8,
    "reference": "",
}

EVAL = {
    "fractions": [0.25, 0.5, 1.0],
    "per_pixel_steps": False,
    "step": 0,
    "theta": 0.5,
    "regions": 3,
    "max_samples": 0,
    "overlays": 4,
    "baselines": False,
    "baseline_samples": 10,
    "reference": "",
}

BASELINE = {
    "method": "occlusion",
    "patch": 5,
    "stride": 1,
    "n_masks": 2000,
    "cell_grid": 7,
    "p_keep": 0.5,
    "blur_stride": 5,
    "sigma": 3.0,
    "seed": 0,
}

DEFAULTS = {
    "collect": {**ENV, "n": 2000, "seed": 42, "policy": "analytic", "policy_epochs": 20, "force": False},
    "train": {"dataset": "", **TRAIN},
    "evaluate": {"dataset": "", "checkpoint": [], **EVAL},
    "explain": {"dataset": "", "checkpoint": "", "index": 0, "reference": ""},
    "counterfactual": {"dataset": "", "checkpoint": "", "index": 0, "regions": 3, "theta": 0.5,
                       "reference": ""},
    "baseline": {"dataset": "", "index": 0, "reference": "", **BASELINE},
}

# every command accepts these too
COMMON = {"out": "", "threads": 1}


def default_out_root():
    return os.environ.get("MASKLAB_OUT") or DEFAULT_OUT_ROOT


def _cast(key, raw, default):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, list):
            if isinstance(raw, (list, tuple)):
                items = list(raw)
            else:
                items = [x.strip() for x in str(raw).split(",") if x.strip()]
            kind = type(default[0]) if default else str
            return [kind(x) for x in items]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise UsageError(f"bad value for {key}: {raw!r}") from None


def read_config_file(path, command):
    """Values from ``[common]`` and ``[<command>]`` sections of a key = value file."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config file {path}: {exc}") from None
    values = {}
    for section in ("common", command):
        if parser.has_section(section):
            values.update(parser.items(section))
    return values


def resolve(command, flags, config_path=None):
    """Merge defaults, file values and explicitly given flags into typed settings."""
    if command not in DEFAULTS:
        raise UsageError(f"unknown command {command!r}")
    defaults = {**COMMON, **DEFAULTS[command]}
    merged = dict(defaults)
    if config_path:
        for key, raw in read_config_file(config_path, command).items():
            key = key.replace("-", "_")
            if key not in defaults:
                raise UsageError(f"unknown key {key!r} for {command}")
            merged[key] = _cast(key, raw, defaults[key])
    for key, val in flags.items():
        if key in defaults and val is not None:
            merged[key] = _cast(key, val, defaults[key])
    if not merged["out"]:
        merged["out"] = str(Path(default_out_root()) / command)
    return merged


def dump(settings, command, path):
    """Write the resolved settings back out as a config file."""
    parser = configparser.ConfigParser(interpolation=None)
    parser[command] = {}
    for key in sorted(settings):
        v = settings[key]
        parser[command][key] = ",".join(str(x) for x in v) if isinstance(v, (list, tuple)) else str(v)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
    return path
