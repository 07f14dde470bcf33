"""Run configuration: a single JSON file plus dotted-key overrides.

The layout is flat and stable: ``data.*`` selects or synthesizes the
dataset, ``cascade.*`` describes the model, ``train.*`` maps one-to-one
onto TrainConfig fields, ``eval.*`` fixes evaluation semantics. The digest
of the canonical JSON identifies a run.
"""

from __future__ import annotations

import copy
import hashlib
import json

from .cascade import build_cascade
from .data import CsvSchema, TierSpec, generate_tiered, load_csv, load_idx, split_dataset
from .errors import ConfigError
from .training import TrainConfig

DEFAULT_ALPHA_GRID = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2]

DEFAULTS = {
    "seed": 0,
    "data": {
        "kind": "tiered",
        "train_fraction": 0.8,
    },
    "cascade": {
        "policy_hidden": 64,
        "stage_costs": "model",
    },
    "train": {
        "batch_size": 128,
        "classifier_lr": 0.01,
        "classifier_lr_drops": [0.5, 0.75],
        "policy_lr": 0.05,
        "policy_lr_decay": 0.9,
        "policy_lr_decay_every": 2,
        "momentum": 0.9,
        "reward_loss": "zero_one",
        "cost_convention": "inclusive",
        "mode": "joint",
        "pretrain_epochs": 0,
        "pretrain_checkpoint": None,
    },
    "eval": {
        "stop_rule": "sample",
        "seed": 123,
    },
    "sweep": {
        "alphas": DEFAULT_ALPHA_GRID,
    },
    "calibrate": {
        "bracket": [1e-5, 1.0],
        "tolerance": 0.05,
        "max_iters": 10,
    },
    "gradcheck": {
        "epsilon": 1e-6,
        "n_samples": 20,
        "n_rollouts": 20000,
        "fd_tolerance": 1e-5,
        "z_threshold": 4.0,
    },
}


def load_config_file(path):
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def with_defaults(cfg):
    return _merge(DEFAULTS, cfg)


def apply_overrides(cfg, assignments):
    """Apply ``dotted.key=value`` overrides; values parse as JSON literals
    and fall back to plain strings."""
    out = copy.deepcopy(cfg)
    for item in assignments or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        if not all(keys):
            raise ConfigError(f"override {item!r} has an empty key segment")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        for key in keys[:-1]:
            nxt = node.get(key)
            if not isinstance(nxt, dict):
                nxt = {}
                node[key] = nxt
            node = nxt
        node[keys[-1]] = value
    return out


def config_digest(cfg):
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def validate_config(cfg, require_alpha=True):
    """Collect every problem before any compute; raise one ConfigError."""
    problems = []
    data = cfg.get("data", {})
    kind = data.get("kind")
    if kind not in ("tiered", "idx", "csv"):
        problems.append(f"data.kind must be tiered/idx/csv, got {kind!r}")
    if kind == "tiered":
        for key in ("separations", "noise_rates", "samples_per_tier",
                    "feature_dim", "num_classes"):
            if key not in data:
                problems.append(f"data.{key} is required for tiered data")
    if kind == "idx":
        for key in ("images", "labels"):
            if key not in data:
                problems.append(f"data.{key} is required for idx data")
    if kind == "csv":
        for key in ("path", "feature_columns", "label_column"):
            if key not in data:
                problems.append(f"data.{key} is required for csv data")
    frac = data.get("train_fraction", 0.8)
    if not (isinstance(frac, (int, float)) and 0 < frac < 1):
        problems.append(f"data.train_fraction must be in (0, 1), got {frac!r}")
    cas = cfg.get("cascade", {})
    if "classifier_hidden" not in cas:
        problems.append("cascade.classifier_hidden is required")
    train = cfg.get("train", {})
    if require_alpha and "alpha" not in train:
        problems.append("train.alpha is required")
    if "epochs" not in train:
        problems.append("train.epochs is required")
    mode = train.get("mode", "joint")
    if mode not in ("joint", "simplified"):
        problems.append(f"train.mode must be joint or simplified, got {mode!r}")
    if mode == "simplified" and not train.get("pretrain_checkpoint") \
            and not train.get("pretrain_epochs"):
        problems.append(
            "simplified mode needs train.pretrain_checkpoint or "
            "train.pretrain_epochs > 0 (classifiers must be pretrained)")
    stop_rule = cfg.get("eval", {}).get("stop_rule", "sample")
    if stop_rule not in ("sample", "threshold"):
        problems.append(f"eval.stop_rule must be sample or threshold, got {stop_rule!r}")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))


def build_dataset(cfg):
    """Full dataset from the data section (before any split)."""
    data = cfg["data"]
    kind = data["kind"]
    if kind == "tiered":
        spec = TierSpec(
            num_tiers=len(data["separations"]),
            separations=tuple(data["separations"]),
            noise_rates=tuple(data["noise_rates"]),
            samples_per_tier=tuple(data["samples_per_tier"]),
            feature_dim=int(data["feature_dim"]),
            num_classes=int(data["num_classes"]),
            seed=int(data.get("seed", cfg.get("seed", 0))),
            modes_per_class=tuple(data["modes_per_class"])
            if "modes_per_class" in data else None,
        )
        return generate_tiered(spec)
    if kind == "idx":
        return load_idx(data["images"], data["labels"])
    if kind == "csv":
        schema = CsvSchema(list(data["feature_columns"]), data["label_column"],
                           data.get("classes"))
        return load_csv(data["path"], schema)
    raise ConfigError(f"unknown data kind {kind!r}")


def build_splits(cfg, dataset):
    frac = cfg["data"].get("train_fraction", 0.8)
    return split_dataset(dataset, frac, int(cfg.get("seed", 0)))


def build_cascade_from_config(cfg, dataset):
    cas = cfg["cascade"]
    input_dim = int(cas.get("input_dim", dataset.n_features))
    num_classes = int(cas.get("num_classes", dataset.num_classes))
    if input_dim != dataset.n_features:
        raise ConfigError(
            f"cascade.input_dim={input_dim} but data has {dataset.n_features} features")
    if num_classes != dataset.num_classes:
        raise ConfigError(
            f"cascade.num_classes={num_classes} but data has {dataset.num_classes}")
    stage_costs = cas.get("stage_costs", "model")
    return build_cascade(
        input_dim=input_dim,
        num_classes=num_classes,
        classifier_hidden=cas["classifier_hidden"],
        policy_hidden=int(cas.get("policy_hidden", 64)),
        seed=int(cas.get("seed", cfg.get("seed", 0))),
        stage_costs=stage_costs,
    )


def build_train_config(cfg):
    train = cfg["train"]
    if "alpha" not in train:
        raise ConfigError("train.alpha is required")
    if "epochs" not in train:
        raise ConfigError("train.epochs is required")
    return TrainConfig(
        alpha=float(train["alpha"]),
        epochs=int(train["epochs"]),
        batch_size=int(train["batch_size"]),
        classifier_lr=float(train["classifier_lr"]),
        classifier_lr_drops=tuple(train["classifier_lr_drops"]),
        policy_lr=float(train["policy_lr"]),
        policy_lr_decay=float(train["policy_lr_decay"]),
        policy_lr_decay_every=int(train["policy_lr_decay_every"]),
        momentum=float(train["momentum"]),
        reward_loss=train["reward_loss"],
        cost_convention=train["cost_convention"],
        mode=train["mode"],
        seed=int(cfg.get("seed", 0)),
    )
