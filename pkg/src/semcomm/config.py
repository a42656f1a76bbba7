"""Run configuration: JSON documents resolved against task and regime defaults.

Every effective value ends up in the resolved dictionary, which is what run
manifests record. Overrides use dotted paths, e.g. ``schedule.n_epochs=50``.

Schema (all keys optional; ``*`` marks task- or regime-dependent defaults)::

    task            "gm" | "mnist"
    regime          "model_aware" | "rl_spg" | "perfect_comm"
    n_tx*           channel uses per agent (gm 8, mnist 14)
    n_feat, n_rx*   hidden widths (gm 32, mnist 64)
    norm_mode       "dim" | "batch"
    sigma_pi2       exploration variance of RL encoder steps
    learning_rate, weight_decay
    link            "inprocess" | "stream"
    schedule        n_epochs*, rx_finetune_epochs*, alternation_block, batch_size, epoch_accounting*
    channel         snr_mode, snr_db, lo_db, hi_db
    seeds           data, init, policy, channel
    gm              n_class, obs_dim, n_agents*, class_std, train_size
    mnist           images_path, labels_path, subset_size, test_images_path, test_labels_path
    eval            snr_grid, n_eval, seed
    out_dir
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

from .errors import ConfigurationError

BASE = {
    "task": "gm",
    "regime": "model_aware",
    "n_tx": None,
    "n_feat": None,
    "n_rx": None,
    "norm_mode": "dim",
    "sigma_pi2": 0.15,
    "learning_rate": 1e-3,
    "weight_decay": 1e-4,
    "link": "inprocess",
    "schedule": {
        "n_epochs": None,
        "rx_finetune_epochs": None,
        "alternation_block": 10,
        "batch_size": 500,
        "epoch_accounting": None,
    },
    "channel": {"snr_mode": "uniform", "snr_db": 6.0, "lo_db": -4.0, "hi_db": 6.0},
    "seeds": {"data": 0, "init": 0, "policy": 0, "channel": 0},
    "gm": {"n_class": 4, "obs_dim": 4, "n_agents": 4, "class_std": 0.5, "train_size": 10000},
    "mnist": {"images_path": None, "labels_path": None, "subset_size": None,
              "test_images_path": None, "test_labels_path": None},
    "eval": {"snr_grid": [-4.0, -2.0, 0.0, 2.0, 4.0, 6.0], "n_eval": 10000, "seed": 0},
    "out_dir": "runs/default",
}

TASK_DEFAULTS = {
    "gm": {"n_tx": 8, "n_feat": 32, "n_rx": 32},
    "mnist": {"n_tx": 14, "n_feat": 64, "n_rx": 64},
}

# (n_epochs, rx_finetune_epochs, epoch_accounting) per task and regime
SCHEDULE_DEFAULTS = {
    ("gm", "model_aware"): (200, 0, "joint"),
    ("gm", "perfect_comm"): (200, 0, "joint"),
    ("gm", "rl_spg"): (600, 120, "alternating_halved"),
    ("mnist", "model_aware"): (100, 0, "joint"),
    ("mnist", "perfect_comm"): (100, 0, "joint"),
    ("mnist", "rl_spg"): (300, 60, "alternating_halved"),
}


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigurationError("unknown key", path)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError("expected an object", path)
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> tuple[str, object]:
    """``a.b=value``; value parsed as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not key=value", "override")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_override(raw: dict, key: str, value) -> dict:
    out = copy.deepcopy(raw)
    node, parts = out, key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError("cannot descend into a scalar", key)
    node[parts[-1]] = value
    return out


def _int(cfg, path, lo=None):
    value = _get(cfg, path)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigurationError(f"expected an integer, got {value!r}", path)
    if lo is not None and value < lo:
        raise ConfigurationError(f"must be at least {lo}, got {value}", path)
    return value


def _num(cfg, path):
    value = _get(cfg, path)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigurationError(f"expected a number, got {value!r}", path)
    return float(value)


def _choice(cfg, path, options):
    value = _get(cfg, path)
    if value not in options:
        raise ConfigurationError(f"must be one of {list(options)}, got {value!r}", path)
    return value


def _get(cfg, path):
    node = cfg
    for p in path.split("."):
        node = node[p]
    return node


def resolve(raw: dict | None = None, overrides=(), seed: int | None = None) -> dict:
    """Fill defaults, apply overrides and ``seed`` (sets all four streams), validate."""
    raw = copy.deepcopy(raw or {})
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        raw = apply_override(raw, key, value)
    if seed is not None:
        raw.setdefault("seeds", {})
        raw["seeds"] = {k: int(seed) for k in BASE["seeds"]}
    cfg = _merge(BASE, raw)
    task = _choice(cfg, "task", TASK_DEFAULTS)
    regime = _choice(cfg, "regime", ("model_aware", "rl_spg", "perfect_comm"))
    for key, value in TASK_DEFAULTS[task].items():
        if cfg[key] is None:
            cfg[key] = value
    sched = cfg["schedule"]
    for key, value in zip(("n_epochs", "rx_finetune_epochs", "epoch_accounting"), SCHEDULE_DEFAULTS[task, regime]):
        if sched[key] is None:
            sched[key] = value
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    for key in ("n_tx", "n_feat", "n_rx"):
        _int(cfg, key, 1)
    _choice(cfg, "norm_mode", ("dim", "batch"))
    _choice(cfg, "link", ("inprocess", "stream"))
    s2 = _num(cfg, "sigma_pi2")
    if not 0.0 <= s2 < 1.0:
        raise ConfigurationError(f"must lie in [0, 1), got {s2}", "sigma_pi2")
    if cfg["regime"] == "rl_spg" and s2 == 0.0:
        raise ConfigurationError("RL training needs sigma_pi2 > 0", "sigma_pi2")
    if _num(cfg, "learning_rate") <= 0:
        raise ConfigurationError("must be positive", "learning_rate")
    if _num(cfg, "weight_decay") < 0:
        raise ConfigurationError("must be non-negative", "weight_decay")
    _int(cfg, "schedule.n_epochs", 1)
    _int(cfg, "schedule.rx_finetune_epochs", 0)
    _int(cfg, "schedule.alternation_block", 1)
    _int(cfg, "schedule.batch_size", 1)
    _choice(cfg, "schedule.epoch_accounting", ("joint", "alternating_halved"))
    _choice(cfg, "channel.snr_mode", ("fixed", "uniform"))
    for key in ("snr_db", "lo_db", "hi_db"):
        _num(cfg, f"channel.{key}")
    if cfg["channel"]["lo_db"] > cfg["channel"]["hi_db"]:
        raise ConfigurationError("lo_db exceeds hi_db", "channel.lo_db")
    for key in BASE["seeds"]:
        _int(cfg, f"seeds.{key}", 0)
    _int(cfg, "eval.n_eval", 1)
    _int(cfg, "eval.seed", 0)
    grid = cfg["eval"]["snr_grid"]
    if not isinstance(grid, list) or not grid or not all(isinstance(v, (int, float)) for v in grid):
        raise ConfigurationError("expected a non-empty list of numbers", "eval.snr_grid")
    if not isinstance(cfg["out_dir"], str) or not cfg["out_dir"]:
        raise ConfigurationError("expected a directory path", "out_dir")
    if cfg["task"] == "gm":
        _int(cfg, "gm.n_class", 2)
        _int(cfg, "gm.obs_dim", 1)
        n_agents = _int(cfg, "gm.n_agents", 1)
        if cfg["gm"]["obs_dim"] % n_agents:
            raise ConfigurationError("must divide gm.obs_dim", "gm.n_agents")
        if cfg["gm"]["n_class"] > 2 ** cfg["gm"]["obs_dim"]:
            raise ConfigurationError("more classes than hypercube corners", "gm.n_class")
        if _num(cfg, "gm.class_std") < 0:
            raise ConfigurationError("must be non-negative", "gm.class_std")
        if _int(cfg, "gm.train_size", 1) < cfg["schedule"]["batch_size"]:
            raise ConfigurationError("smaller than one batch", "gm.train_size")
    else:
        for key in ("images_path", "labels_path"):
            path = cfg["mnist"][key]
            if not isinstance(path, str) or not os.path.exists(path):
                raise ConfigurationError(f"file not found: {path!r}", f"mnist.{key}")
        test = [cfg["mnist"][k] for k in ("test_images_path", "test_labels_path")]
        if (test[0] is None) != (test[1] is None):
            raise ConfigurationError("give both test paths or neither", "mnist.test_images_path")
        for key in ("test_images_path", "test_labels_path"):
            path = cfg["mnist"][key]
            if path is not None and not os.path.exists(path):
                raise ConfigurationError(f"file not found: {path!r}", f"mnist.{key}")
        if cfg["mnist"]["subset_size"] is not None:
            _int(cfg, "mnist.subset_size", 1)


def load(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config: {exc}", "config") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"invalid JSON: {exc}", "config") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError("top level must be an object", "config")
    return raw
