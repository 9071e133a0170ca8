"""Config files: a YAML key/value tree over desk-scale defaults.

Absent keys fall back to defaults, unknown keys are rejected by their dotted
path, and the fully resolved tree is echoed next to run outputs so the echo
can be re-fed to reproduce the run byte for byte. Task probabilities are
stored exactly as given (validated to sum to 1 within 1e-9, never silently
renormalized) so the echo is a fixed point.
"""
from __future__ import annotations

import copy
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from .data import DEFAULT_TASKS, build_vocabulary
from .matching import DetectionLossWeights
from .model import MultitaskModel
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def _default_tree() -> dict:
    names = list(DEFAULT_TASKS)
    return {
        "run": {
            "seed": 0,
            "iterations": 20000,
            "eval_interval": 1000,
            "checkpoint_interval": 5000,
        },
        "tasks": {
            "names": names,
            "probs": [DEFAULT_TASKS[t].prob for t in names],
        },
        "queries": {t: DEFAULT_TASKS[t].queries for t in names},
        "model": {
            "heads": 4,
            "ffn": 128,
            "dropout": 0.1,
            "max_text_len": 48,
            "use_task_tokens": True,
            "cls_only": True,
            "all_layer_cls_loss": False,
            "dtype": "float32",
        },
        "encoder": {
            "hidden": 64,
            "layers": 2,
            "text_layers": 2,
        },
        "decoder": {
            "hidden": 64,
            "layers": 2,
            "mode": "shared",
        },
        "optimizer": {
            "lr": 3e-4,
            "warmup": 500,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
            "weight_decay": 1e-4,
        },
        "loss": {
            "lambda_cls": 1.0,
            "lambda_l1": 5.0,
            "lambda_giou": 2.0,
            "background_weight": 0.1,
            "attribute_coef": 0.5,
        },
        "training": {
            "batch_size": 16,
            "frozen_encoders": False,
            "train_pool": 4096,
            "val_detection": 64,
            "val_classification": 256,
        },
        "augment": {
            "enabled": True,
            "resize_min": 48,
            "resize_max": 80,
            "crop_min": 38,
            "crop_max": 60,
        },
    }


def _coerce(key: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{key} has unsupported type")


def _merge(dst: dict, src: dict, path: str = "") -> None:
    for k, v in src.items():
        full = f"{path}.{k}" if path else str(k)
        if not isinstance(k, str) or k not in dst:
            raise ConfigError(f"unknown configuration key: {full}")
        if isinstance(dst[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{full} must be a mapping")
            _merge(dst[k], v, full)
        else:
            dst[k] = _coerce(full, dst[k], v)


def validate_config(cfg: dict) -> None:
    names = cfg["tasks"]["names"]
    probs = cfg["tasks"]["probs"]
    if not names:
        raise ConfigError("tasks.names must not be empty")
    if len(set(names)) != len(names):
        raise ConfigError("tasks.names contains duplicates")
    for n in names:
        if n not in DEFAULT_TASKS:
            raise ConfigError(f"tasks.names contains unknown task {n!r}")
    if len(probs) != len(names):
        raise ConfigError("tasks.probs must have one entry per task in tasks.names")
    p = [float(x) for x in probs]
    if any(x < 0 for x in p):
        raise ConfigError("tasks.probs must be non-negative")
    if abs(sum(p) - 1.0) > 1e-9:
        raise ConfigError(f"tasks.probs sums to {sum(p)}, expected 1 within 1e-9")
    cfg["tasks"]["probs"] = p
    for t, q in cfg["queries"].items():
        if q < 1:
            raise ConfigError(f"queries.{t} must be at least 1")
    if cfg["run"]["iterations"] < 1:
        raise ConfigError("run.iterations must be positive")
    if not 0 <= cfg["optimizer"]["warmup"] < cfg["run"]["iterations"]:
        raise ConfigError("optimizer.warmup must be smaller than run.iterations")
    if cfg["optimizer"]["lr"] <= 0:
        raise ConfigError("optimizer.lr must be positive")
    for section in ("encoder", "decoder"):
        if cfg[section]["hidden"] % cfg["model"]["heads"] != 0:
            raise ConfigError(f"{section}.hidden must be divisible by model.heads")
        if cfg[section]["layers"] < 1:
            raise ConfigError(f"{section}.layers must be positive")
    if cfg["decoder"]["mode"] not in ("shared", "separate"):
        raise ConfigError("decoder.mode must be 'shared' or 'separate'")
    if cfg["model"]["dtype"] not in ("float32", "float64"):
        raise ConfigError("model.dtype must be 'float32' or 'float64'")
    if cfg["training"]["batch_size"] < 1:
        raise ConfigError("training.batch_size must be positive")
    a = cfg["augment"]
    if not a["resize_min"] <= a["resize_max"]:
        raise ConfigError("augment.resize_min must not exceed augment.resize_max")
    if not a["crop_min"] <= a["crop_max"] <= a["resize_max"]:
        raise ConfigError("augment crop range must fit inside the resize range")


def load_config(path=None) -> dict:
    """Resolved config: defaults overlaid with the file, then validated."""
    cfg = copy.deepcopy(_default_tree())
    if path is not None:
        text = Path(path).read_text()
        try:
            user = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if user is None:
            user = {}
        if not isinstance(user, dict):
            raise ConfigError(f"{path} must contain a mapping at the top level")
        _merge(cfg, user)
    validate_config(cfg)
    return cfg


def apply_overrides(
    cfg: dict,
    seed: Optional[int] = None,
    iterations: Optional[int] = None,
    tasks: Optional[Sequence[str]] = None,
) -> dict:
    """Fold command-line overrides into the resolved tree.

    A task subset keeps the model's task universe intact and moves all the
    sampling probability onto the subset (rescaled from the configured
    values), so runs over different subsets stay architecturally identical.
    """
    if seed is not None:
        cfg["run"]["seed"] = int(seed)
    if iterations is not None:
        cfg["run"]["iterations"] = int(iterations)
    if tasks is not None:
        names = cfg["tasks"]["names"]
        unknown = [t for t in tasks if t not in names]
        if unknown:
            raise ConfigError(f"tasks.names does not include: {', '.join(unknown)}")
        if not tasks:
            raise ConfigError("task subset must not be empty")
        keep = set(tasks)
        base = dict(zip(names, cfg["tasks"]["probs"]))
        total = sum(base[t] for t in keep)
        if total <= 0:
            # uniform over the subset when the configured mass there is zero
            cfg["tasks"]["probs"] = [1.0 / len(keep) if t in keep else 0.0 for t in names]
        else:
            cfg["tasks"]["probs"] = [base[t] / total if t in keep else 0.0 for t in names]
    validate_config(cfg)
    return cfg


def dumps_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def dump_config(cfg: dict, path) -> None:
    Path(path).write_text(dumps_config(cfg))


def to_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        tasks=list(cfg["tasks"]["names"]),
        probs=list(cfg["tasks"]["probs"]),
        iterations=cfg["run"]["iterations"],
        batch_size=cfg["training"]["batch_size"],
        lr=cfg["optimizer"]["lr"],
        warmup=cfg["optimizer"]["warmup"],
        beta1=cfg["optimizer"]["beta1"],
        beta2=cfg["optimizer"]["beta2"],
        eps=cfg["optimizer"]["eps"],
        weight_decay=cfg["optimizer"]["weight_decay"],
        decoder_mode=cfg["decoder"]["mode"],
        use_task_tokens=cfg["model"]["use_task_tokens"],
        cls_only=cfg["model"]["cls_only"],
        all_layer_cls_loss=cfg["model"]["all_layer_cls_loss"],
        frozen_encoders=cfg["training"]["frozen_encoders"],
        seed=cfg["run"]["seed"],
        dtype=cfg["model"]["dtype"],
        augment=cfg["augment"]["enabled"],
        resize_min=cfg["augment"]["resize_min"],
        resize_max=cfg["augment"]["resize_max"],
        crop_min=cfg["augment"]["crop_min"],
        crop_max=cfg["augment"]["crop_max"],
        train_pool=cfg["training"]["train_pool"],
        val_detection=cfg["training"]["val_detection"],
        val_classification=cfg["training"]["val_classification"],
        eval_interval=cfg["run"]["eval_interval"],
        checkpoint_interval=cfg["run"]["checkpoint_interval"],
    )


def build_model_from_config(cfg: dict, vocab=None) -> MultitaskModel:
    vocab = vocab if vocab is not None else build_vocabulary()
    specs = {}
    for name, prob in zip(cfg["tasks"]["names"], cfg["tasks"]["probs"]):
        specs[name] = replace(DEFAULT_TASKS[name], prob=prob, queries=cfg["queries"][name])
    weights = DetectionLossWeights(
        lambda_cls=cfg["loss"]["lambda_cls"],
        lambda_l1=cfg["loss"]["lambda_l1"],
        lambda_giou=cfg["loss"]["lambda_giou"],
        bg_weight=cfg["loss"]["background_weight"],
        attr_coef=cfg["loss"]["attribute_coef"],
    )
    model = MultitaskModel(
        specs,
        vocab_size=len(vocab),
        seed=cfg["run"]["seed"],
        decoder_mode=cfg["decoder"]["mode"],
        encoder_hidden=cfg["encoder"]["hidden"],
        encoder_layers=cfg["encoder"]["layers"],
        text_layers=cfg["encoder"]["text_layers"],
        decoder_hidden=cfg["decoder"]["hidden"],
        decoder_layers=cfg["decoder"]["layers"],
        num_heads=cfg["model"]["heads"],
        ffn_dim=cfg["model"]["ffn"],
        dropout=cfg["model"]["dropout"],
        max_text_len=cfg["model"]["max_text_len"],
        use_task_tokens=cfg["model"]["use_task_tokens"],
        cls_only=cfg["model"]["cls_only"],
        all_layer_cls_loss=cfg["model"]["all_layer_cls_loss"],
        loss_weights=weights,
    )
    if cfg["model"]["dtype"] == "float32":
        model.to_dtype(np.float32)
    return model
