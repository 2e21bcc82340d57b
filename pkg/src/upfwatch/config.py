"""Configuration file (JSON) shared by ``serve``, ``sim`` and ``loop``.

Top-level sections, all optional::

    {
      "service": {"listen_host": "127.0.0.1", "listen_port": 8805,
                  "model_path": "model.json", "smf_endpoint": "http://127.0.0.1:8806",
                  "ring_capacity": 32, "feature_dim": 16},
      "policy":  {"budget_ms": {"LOL": 100, "TFT": 100, "VAL": 100},
                  "breach_fraction": 0.5, "min_windows": 4, "cooldown_s": 30},
      "sim":     {"duration_s": 600, "request_rate_hz": 20, "teids": [4097],
                  "jitter_ms": 5, "loss_prob": 0.001, "seed": 0},
      "profile": {"min_ms": 1, "max_ms": 600, "period_s": 30, "phase_rad": 0},
      "tracker": {"match_timeout_ms": 2000, "max_pending_per_teid": 4096,
                  "window_ms": 1000},
      "scenarios": [ ... see upfwatch.loop ... ]
    }

Environment overrides (applied after the file):

    UPFWATCH_LISTEN_HOST, UPFWATCH_LISTEN_PORT, UPFWATCH_MODEL_PATH,
    UPFWATCH_SMF_ENDPOINT, UPFWATCH_RING_CAPACITY, UPFWATCH_BUDGET_MS,
    UPFWATCH_BREACH_FRACTION, UPFWATCH_MIN_WINDOWS, UPFWATCH_COOLDOWN_S
"""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Mapping, Optional

DEFAULTS: dict = {
    "service": {
        "listen_host": "127.0.0.1",
        "listen_port": 8805,
        "model_path": None,
        "smf_endpoint": None,
        "ring_capacity": 32,
        "feature_dim": 16,
    },
    "policy": {
        "budget_ms": {"LOL": 100.0, "TFT": 100.0, "VAL": 100.0},
        "breach_fraction": 0.5,
        "min_windows": 4,
        "cooldown_s": 30.0,
    },
    "sim": {
        "duration_s": 600.0,
        "request_rate_hz": 20.0,
        "teids": [0x1001],
        "jitter_ms": 5.0,
        "loss_prob": 0.001,
        "seed": 0,
    },
    "profile": {"min_ms": 1.0, "max_ms": 600.0, "period_s": 30.0, "phase_rad": 0.0},
    "tracker": {"match_timeout_ms": 2000.0, "max_pending_per_teid": 4096, "window_ms": 1000.0},
    "scenarios": [],
}

# env var -> (section, key, parser)
ENV_OVERRIDES = {
    "UPFWATCH_LISTEN_HOST": ("service", "listen_host", str),
    "UPFWATCH_LISTEN_PORT": ("service", "listen_port", int),
    "UPFWATCH_MODEL_PATH": ("service", "model_path", str),
    "UPFWATCH_SMF_ENDPOINT": ("service", "smf_endpoint", str),
    "UPFWATCH_RING_CAPACITY": ("service", "ring_capacity", int),
    "UPFWATCH_BREACH_FRACTION": ("policy", "breach_fraction", float),
    "UPFWATCH_MIN_WINDOWS": ("policy", "min_windows", int),
    "UPFWATCH_COOLDOWN_S": ("policy", "cooldown_s", float),
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, extra: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, Mapping) and isinstance(out.get(key), dict) and key != "budget_ms":
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, env: Optional[Mapping[str, str]] = None) -> dict:
    """Defaults, then the JSON file at ``path`` (if any), then environment overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
        cfg = _merge(cfg, doc)
    env = os.environ if env is None else env
    for var, (section, key, parse) in ENV_OVERRIDES.items():
        if var in env:
            try:
                cfg[section][key] = parse(env[var])
            except ValueError as exc:
                raise ConfigError(f"{var}={env[var]!r}: {exc}") from exc
    if "UPFWATCH_BUDGET_MS" in env:
        try:
            budget = float(env["UPFWATCH_BUDGET_MS"])
        except ValueError as exc:
            raise ConfigError(f"UPFWATCH_BUDGET_MS={env['UPFWATCH_BUDGET_MS']!r}: {exc}") from exc
        cfg["policy"]["budget_ms"] = {k: budget for k in cfg["policy"]["budget_ms"]}
    return cfg
