"""JSON run configuration: ``{"model": {...}, "loss": {...}, "train": {...}}``.

Every key is optional and falls back to the library default. Unknown keys
and ill-typed values raise :class:`ConfigurationError` naming the key.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .exceptions import ConfigurationError
from .losses import KlPolicy, LossParams
from .model import Block, ModelConfig
from .train import Schedule, TrainConfig

SECTIONS = ("model", "loss", "train")
_TRAIN_KEYS = ("epochs", "batch_size", "triplets_per_epoch", "seed", "k_folds", "clip_norm", "schedule")


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigurationError(f"config key '{section}' must be an object")
    for key in given:
        if key not in allowed:
            raise ConfigurationError(f"config key '{section}.{key}' is not recognised (allowed: {sorted(allowed)})")


def _build(cls, section: str, values: dict):
    try:
        return cls(**values)
    except ConfigurationError as exc:
        raise ConfigurationError(f"config section '{section}': {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"config section '{section}': {exc}") from exc


def _typed(section: str, values: dict, defaults) -> None:
    for key, value in values.items():
        default = getattr(defaults, key, None)
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, str):
            ok = isinstance(value, str)
        else:
            continue
        if not ok:
            raise ConfigurationError(f"config key '{section}.{key}' must be {type(default).__name__}, got {value!r}")


def config_from_dict(raw: dict) -> TrainConfig:
    _check_keys("<root>", raw, SECTIONS)
    model_raw = dict(raw.get("model", {}))
    _check_keys("model", model_raw, {f.name for f in dataclasses.fields(ModelConfig)})
    _typed("model", model_raw, ModelConfig())
    if "blocks" in model_raw:
        blocks = model_raw["blocks"]
        if not isinstance(blocks, list):
            raise ConfigurationError("config key 'model.blocks' must be a list")
        for i, b in enumerate(blocks):
            if isinstance(b, dict):
                _check_keys(f"model.blocks[{i}]", b, {f.name for f in dataclasses.fields(Block)})
    model = _build(ModelConfig, "model", model_raw)

    loss_raw = dict(raw.get("loss", {}))
    _check_keys("loss", loss_raw, {f.name for f in dataclasses.fields(LossParams)})
    _typed("loss", loss_raw, LossParams())
    if isinstance(loss_raw.get("K_l_policy"), dict):
        _check_keys("loss.K_l_policy", loss_raw["K_l_policy"], {f.name for f in dataclasses.fields(KlPolicy)})
    loss = _build(LossParams, "loss", loss_raw)

    train_raw = dict(raw.get("train", {}))
    _check_keys("train", train_raw, _TRAIN_KEYS)
    _typed("train", train_raw, TrainConfig())
    sched_raw = train_raw.pop("schedule", {})
    _check_keys("train.schedule", sched_raw, {f.name for f in dataclasses.fields(Schedule)})
    _typed("train.schedule", sched_raw, Schedule())
    schedule = _build(Schedule, "train.schedule", sched_raw)
    if train_raw.get("triplets_per_epoch") is not None and not isinstance(train_raw["triplets_per_epoch"], int):
        raise ConfigurationError("config key 'train.triplets_per_epoch' must be int or null")
    return _build(TrainConfig, "train", dict(train_raw, model=model, loss=loss, schedule=schedule))


def load_config(path) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from exc
    return config_from_dict(raw)


def config_to_dict(cfg: TrainConfig) -> dict:
    train = {k: getattr(cfg, k) for k in _TRAIN_KEYS if k != "schedule"}
    train["schedule"] = dataclasses.asdict(cfg.schedule)
    return {"model": cfg.model.to_dict(), "loss": dataclasses.asdict(cfg.loss), "train": train}
