"""Run configuration: one JSON file, dot-path overrides, content hashing.

Unknown keys are rejected with their full path; every artifact a command
writes is stamped with the hash of the resolved configuration so mismatched
checkpoint/config pairs can be refused.
"""

from __future__ import annotations

import copy
import hashlib
import json
from typing import Any

from .data import WorldSpec
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainSettings

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "world": {
        "item_count": 10000,
        "cluster_count": 8,
        "user_count": 1000,
        "interests_per_user": 4,
        "drift_prob": 0.2,
        "noise_prob": 0.05,
        "trace_len_min": 65,
        "trace_len_max": 65,
        "seed": 0,
    },
    "model": {
        "dim": 32,
        "layers": 2,
        "heads": 4,
        "interests": 4,
        "max_seq_len": 64,
        "vocab_size": None,  # defaults to world.item_count
        "tag_vocab": None,  # defaults to world.cluster_count
        "windows": [[16, 1]],
        "raw_tail": 48,
        "watch_bucket_max": 600.0,
        "watch_bucket_count": 600,
        "duration_bucket_max": 300.0,
        "duration_bucket_count": 1000,
        "smoothing_alpha": 0.1,
        "attributes": ["watch_time", "duration", "tag_id", "labels"],
        "normalize": False,
        "ffn_multiplier": 4,
        "norm_eps": 1e-6,
        "item_init_scale": None,
        "query_init_scale": None,
        "query_init_orthogonal": False,
    },
    "train": {
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "batch_size": 64,
        "steps": 3000,
        "checkpoint_every": 1000,
        "logq_decay": 0.9999,
        "logq_floor": 1e-6,
        "item_lr": None,
    },
    "eval": {
        "cutoffs": [50, 100, 500, 1000],
        "filter_history": False,
        "request_count": 1000,
    },
}

REQUIRED_KEYS = ("seed", "world")


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(defaults[key], dict) and not isinstance(value, dict):
            raise ConfigError(f"config key {here!r} must be a section")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = value
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one ``dot.path=value`` override in place (value parsed as JSON)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like path=value")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def load_config(path: str, overrides: list[str] | None = None) -> dict:
    try:
        with open(path) as f:
            user = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path!r}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path!r} is not valid JSON: {e}") from e
    for key in REQUIRED_KEYS:
        if key not in user:
            raise ConfigError(f"missing required config key {key!r}")
    cfg = _merge(DEFAULTS, user)
    for assignment in overrides or []:
        apply_override(cfg, assignment)
    if cfg["model"]["vocab_size"] is None:
        cfg["model"]["vocab_size"] = cfg["world"]["item_count"]
    if cfg["model"]["tag_vocab"] is None:
        cfg["model"]["tag_vocab"] = cfg["world"]["cluster_count"]
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def world_spec(cfg: dict) -> WorldSpec:
    return WorldSpec(**cfg["world"])


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        dim=m["dim"],
        layers=m["layers"],
        heads=m["heads"],
        interests=m["interests"],
        max_seq_len=m["max_seq_len"],
        vocab_size=m["vocab_size"],
        tag_vocab=m["tag_vocab"],
        windows=tuple(tuple(w) for w in m["windows"]),
        raw_tail=m["raw_tail"],
        watch_bucket_max=m["watch_bucket_max"],
        watch_bucket_count=m["watch_bucket_count"],
        duration_bucket_max=m["duration_bucket_max"],
        duration_bucket_count=m["duration_bucket_count"],
        smoothing_alpha=m["smoothing_alpha"],
        attributes=tuple(m["attributes"]),
        normalize=m["normalize"],
        ffn_multiplier=m["ffn_multiplier"],
        norm_eps=m["norm_eps"],
        item_init_scale=m["item_init_scale"],
        query_init_scale=m["query_init_scale"],
        query_init_orthogonal=m["query_init_orthogonal"],
    )


def train_settings(cfg: dict) -> TrainSettings:
    return TrainSettings(**cfg["train"])
