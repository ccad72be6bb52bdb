"""Flat dotted-key configuration with file loading and stable hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import yaml


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


DEFAULTS: dict[str, Any] = {
    "data.resolution": 64,
    "data.n_outfits": 200,
    "data.n_categories": 4,
    "data.seed": 0,
    "data.split_ratio": 0.8,
    "data.background_tolerance": 0.1,
    "data.root": None,
    "extractor.d_v": 256,
    "extractor.d_cat": 50,
    "extractor.hidden": 256,
    "extractor.mlp_layers": 4,
    "extractor.mlp_width": 512,
    "extractor.channels": [32, 64, 128],
    "extractor.style_dim": 512,
    "extractor.n_scales": 3,
    "generator.base_channels": 16,
    "generator.max_channels": 128,
    "generator.resolution": 64,
    "dis.channels": 16,
    "dis.max_channels": 128,
    "dis.logit_clamp": 20.0,
    "collocation.embed_dim": 128,
    "collocation.feature_dim": 128,
    "collocation.channels": 16,
    "collocation.margin": None,
    "loss.perceptual_backend": "frozen_random",
    "loss.perceptual_channels": [8, 16, 32, 32],
    "train.batch_size": 4,
    "train.n_iter": 120_000,
    "train.lr": 0.002,
    "train.adam_beta1": 0.0,
    "train.adam_beta2": 0.99,
    "train.lambda1": 100.0,
    "train.lambda2": 10.0,
    "train.lambda3": 10.0,
    "train.r1_every": 16,
    "train.r1_gamma": 10.0,
    "train.seed": 0,
    "train.ckpt_every": 1000,
    "train.leak_check_every": 100,
    "eval.settings": [1, 2, 3],
    "eval.seed": 0,
    "eval.max_outfits": None,
}


def flatten(tree: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    """Flatten nested mappings into dotted keys. Already-dotted keys pass through."""
    out: dict[str, Any] = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> dict[str, Any]:
    """Merge defaults, an optional YAML / key=value file and overrides.

    Unknown keys are rejected so typos surface early.
    """
    cfg = copy.deepcopy(DEFAULTS)
    layers: list[Mapping[str, Any]] = []
    if path is not None:
        layers.append(read_config_file(path))
    if overrides:
        layers.append(flatten(overrides))
    for layer in layers:
        for key, value in layer.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key: {key}")
            cfg[key] = value
    validate(cfg)
    return cfg


def read_config_file(path: str | Path) -> dict[str, Any]:
    text = Path(path).read_text()
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError:
        tree = None
    if not isinstance(tree, Mapping):
        # plain key=value lines
        tree = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line: {line!r}")
            key, raw = line.split("=", 1)
            tree[key.strip()] = yaml.safe_load(raw.strip())
    return flatten(tree)


def validate(cfg: Mapping[str, Any]) -> None:
    res = cfg["data.resolution"]
    if not isinstance(res, int) or res < 16 or res & (res - 1):
        raise ConfigError(f"data.resolution must be a power of two >= 16, got {res}")
    if cfg["generator.resolution"] != res:
        raise ConfigError("generator.resolution must equal data.resolution")
    if not isinstance(cfg["data.n_categories"], int) or cfg["data.n_categories"] < 2:
        raise ConfigError("data.n_categories must be an integer >= 2")
    if not 0.0 < cfg["data.split_ratio"] < 1.0:
        raise ConfigError("data.split_ratio must lie in (0, 1)")
    if cfg["loss.perceptual_backend"] not in ("pretrained", "frozen_random", "off"):
        raise ConfigError(f"bad loss.perceptual_backend {cfg['loss.perceptual_backend']!r}")
    if cfg["train.r1_every"] < 1:
        raise ConfigError("train.r1_every must be >= 1")


def config_hash(cfg: Mapping[str, Any], exclude_prefixes: tuple[str, ...] = ("eval.", "train.n_iter", "train.ckpt_every", "data.root")) -> str:
    """sha256 over the canonical JSON of the config.

    Keys that may legitimately change on resume (run length, checkpoint cadence,
    paths, evaluation settings) are left out.
    """
    relevant = {k: v for k, v in cfg.items() if not k.startswith(exclude_prefixes)}
    blob = json.dumps(relevant, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def dump_config(cfg: Mapping[str, Any], path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(dict(cfg), sort_keys=True))
