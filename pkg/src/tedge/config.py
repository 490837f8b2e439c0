"""Experiment configuration: a JSON document with six sections.

Every key has a default, so a config file only lists what it changes.
``set_key`` applies ``section.key=value`` overrides from the command line.
:func:`validate` checks everything it can before any stage runs and reports
the offending key path.
"""
from __future__ import annotations

import copy
import json
import math
from pathlib import Path

from .cachesim import REACTIVE_POLICIES
from .vit.config import PRESETS, ViTConfig, preset_model

__all__ = ["ConfigError", "DEFAULTS", "load_config", "set_key", "validate", "model_config", "slot_horizon"]

DEFAULTS: dict = {
    "topology": {
        "n_users": 600,
        "area": [1000.0, 1000.0],
        "expected_faps": 5.0,
        "n_uavs": 1,
        "fap_range": 300.0,
        "uav_range": None,  # None: area diagonal
    },
    "workload": {
        "source": "synthetic",  # or "movielens"
        "path": None,  # MovieLens ratings file for "ingest"
        "n_contents": 200,
        "gamma": 0.8,
        "zeta": 0.0,
        "n_slots": 300,
        "requests_per_slot": 400,
        "drift_period": 50,  # None: stationary
        "slot_seconds": 400,
        "n_users": None,  # None: one fresh user id per request
    },
    "pipeline": {
        "slot_seconds": 1,  # slot length of the request matrix
        "window_len": 400,  # W, in slots
        "history_len": 25,  # l
        "k": 20,
        "gaf_scale": "sample",
        "node": None,  # None: one cache sees the whole trace; int: that hgNB's share
    },
    "model": {
        "preset": 1,  # preset variant 1..9, or None to use the explicit fields below
        "overrides": {},
    },
    "training": {
        "epochs": 8,
        "lr": 1e-3,
        "batch_size": 256,
        "seed": 0,
        "val_fraction": 0.2,
        "train_fraction": 0.6,  # earliest share of samples used for training; the rest is the test span
        "sample_stride": 1,
        "weight_decay": 1e-3,
        "betas": [0.9, 0.999],
    },
    "simulation": {
        "capacity": None,  # None: pipeline.k
        "policies": ["fifo", "lru", "lfu", "optimal", "tedge"],
    },
}

SIM_POLICIES = REACTIVE_POLICIES + ("optimal", "tedge", "label")


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "overrides":
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a section (object)")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None) -> dict:
    """Defaults merged with the JSON file at ``path`` (if any)."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        user = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path}: {e}") from None
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    return _merge(DEFAULTS, user)


def set_key(config: dict, assignment: str) -> dict:
    """Apply ``section.key=value``; ``value`` is parsed as JSON, else kept as text."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    cur = node
    parts = path.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return _merge(config, node)


def model_config(config: dict) -> ViTConfig:
    m = config["model"]
    l = config["pipeline"]["history_len"]
    fields = {"image_size": l, "gaf_scale": config["pipeline"]["gaf_scale"]}
    fields.update(m["overrides"])
    if fields.get("input_mode") == "matrix":
        fields.setdefault("n_classes", config["workload"]["n_contents"])
    if m["preset"] is None:
        return ViTConfig.from_dict(fields)
    return preset_model(m["preset"], **fields)


def slot_horizon(config: dict) -> int | None:
    """Number of request-matrix slots of a synthetic trace (None for MovieLens)."""
    w = config["workload"]
    if w["source"] != "synthetic":
        return None
    return math.ceil(w["n_slots"] * w["slot_seconds"] / config["pipeline"]["slot_seconds"])


def _check(cond: bool, key: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{key}: {msg}")


def _int(config, key, lo=None, allow_none=False):
    section, name = key.split(".")
    v = config[section][name]
    if v is None and allow_none:
        return
    _check(isinstance(v, int) and not isinstance(v, bool), key, f"must be an integer, got {v!r}")
    if lo is not None:
        _check(v >= lo, key, f"must be >= {lo}, got {v}")


def _num(config, key, lo=None, hi=None):
    section, name = key.split(".")
    v = config[section][name]
    _check(isinstance(v, (int, float)) and not isinstance(v, bool), key, f"must be a number, got {v!r}")
    if lo is not None:
        _check(v >= lo, key, f"must be >= {lo}, got {v}")
    if hi is not None:
        _check(v <= hi, key, f"must be <= {hi}, got {v}")


def validate(config: dict) -> dict:
    """Raise :class:`ConfigError` naming the first bad key; returns ``config``."""
    t, w, p, tr, s = (config[k] for k in ("topology", "workload", "pipeline", "training", "simulation"))
    _int(config, "topology.n_users", 0)
    _int(config, "topology.n_uavs", 0)
    _check(isinstance(t["area"], list) and len(t["area"]) == 2 and all(a > 0 for a in t["area"]),
           "topology.area", "must be [width, height] with positive sides")
    _num(config, "topology.expected_faps", 0)
    _num(config, "topology.fap_range", 0)

    _check(w["source"] in ("synthetic", "movielens"), "workload.source", "must be 'synthetic' or 'movielens'")
    if w["source"] == "movielens":
        _check(w["path"] is not None, "workload.path", "is required for the movielens source")
        _check(Path(w["path"]).is_file(), "workload.path", f"file {w['path']} does not exist")
    _int(config, "workload.n_contents", 1)
    _num(config, "workload.gamma", 0)
    _num(config, "workload.zeta", 0)
    _int(config, "workload.n_slots", 1)
    _int(config, "workload.requests_per_slot", 0)
    _int(config, "workload.drift_period", 1, allow_none=True)
    _int(config, "workload.slot_seconds", 1)
    _int(config, "workload.n_users", 1, allow_none=True)
    if w["n_users"] is not None:
        _check(w["requests_per_slot"] <= w["n_users"], "workload.requests_per_slot",
               "exceeds workload.n_users (one request per user per slot)")

    _int(config, "pipeline.slot_seconds", 1)
    _int(config, "pipeline.window_len", 1)
    _int(config, "pipeline.history_len", 1)
    _int(config, "pipeline.k", 1)
    _int(config, "pipeline.node", 1, allow_none=True)
    _check(p["gaf_scale"] in ("sample", "series"), "pipeline.gaf_scale", "must be 'sample' or 'series'")
    _check(p["k"] <= w["n_contents"], "pipeline.k", f"K={p['k']} exceeds N_c={w['n_contents']}")
    T = slot_horizon(config)
    if T is not None:
        _check(p["window_len"] <= T, "pipeline.window_len", f"W={p['window_len']} exceeds T={T}")
        n_w = T // p["window_len"]
        _check(p["history_len"] < n_w, "pipeline.history_len", f"l={p['history_len']} must be < N_W={n_w}")

    m = config["model"]
    _check(m["preset"] is None or m["preset"] in PRESETS, "model.preset", f"must be one of 1..9 or null, got {m['preset']!r}")
    _check(isinstance(m["overrides"], dict), "model.overrides", "must be an object")
    try:
        mc = model_config(config)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"model: {e}") from None
    if mc.input_mode == "gaf":
        _check(mc.image_size == p["history_len"] and mc.width == p["history_len"], "model.overrides",
               "GAF images are l x l; image_size must equal pipeline.history_len")
    elif T is not None:
        _check(mc.n_classes == w["n_contents"], "model.overrides", "matrix input needs n_classes == N_c")

    _int(config, "training.epochs", 1)
    _num(config, "training.lr", 0)
    _int(config, "training.batch_size", 1)
    _int(config, "training.seed", 0)
    _num(config, "training.val_fraction", 0, 0.9)
    _num(config, "training.train_fraction", 0.05, 1.0)
    _int(config, "training.sample_stride", 1)
    _num(config, "training.weight_decay", 0)
    _check(isinstance(tr["betas"], list) and len(tr["betas"]) == 2 and all(0 <= b < 1 for b in tr["betas"]),
           "training.betas", "must be [beta1, beta2] in [0, 1)")

    _int(config, "simulation.capacity", 1, allow_none=True)
    cap = s["capacity"] if s["capacity"] is not None else p["k"]
    _check(cap <= w["n_contents"], "simulation.capacity", f"K={cap} exceeds N_c={w['n_contents']}")
    _check(isinstance(s["policies"], list) and s["policies"], "simulation.policies", "must be a non-empty list")
    for pol in s["policies"]:
        _check(pol in SIM_POLICIES, "simulation.policies", f"unknown policy {pol!r}; choose from {SIM_POLICIES}")
    if "tedge" in s["policies"]:
        _check(cap == p["k"], "simulation.capacity", "the tedge policy caches the predictor's Top-K, so capacity must equal pipeline.k")
    return config
