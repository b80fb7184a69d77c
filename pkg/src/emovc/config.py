"""Flat dotted-key run configuration.

Config files are plain text, one ``section.field = value`` per line with
``#`` comments. Sections map onto the training dataclasses:

* ``trainer.*``  -> TrainingConfig scalar fields
* ``weights.*``  -> LossWeights
* ``model.*``    -> ModelHyperParams

Every consumed key is declared by those dataclasses; anything else is
rejected. The fully resolved config is written back into the run directory
so a run can be reproduced from its own artifacts.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from emovc.losses import LossWeights
from emovc.networks import ModelHyperParams
from emovc.trainer import TrainingConfig


class ConfigError(ValueError):
    """Carries every validation failure found, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


_SKIP_TRAINER_FIELDS = {"weights", "hp"}


def _sections(config: TrainingConfig):
    return {"trainer": config, "weights": config.weights, "model": config.hp}


def known_keys() -> list[str]:
    keys = []
    for section, obj in _sections(TrainingConfig()).items():
        for f in dataclasses.fields(obj):
            if section == "trainer" and f.name in _SKIP_TRAINER_FIELDS:
                continue
            keys.append(f"{section}.{f.name}")
    return sorted(keys)


def _parse_value(raw: str, current):
    raw = raw.strip()
    if raw.lower() in ("none", "null"):
        return None
    if isinstance(current, bool) or raw.lower() in ("true", "false", "yes", "no"):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if current is None:
        # optional ints (classifier_start_epoch and friends)
        return int(raw)
    return raw


def apply_entries(config: TrainingConfig, entries: dict[str, str]) -> TrainingConfig:
    """Return a new TrainingConfig with the entries applied; collects every
    unknown key and parse failure into one ConfigError."""
    problems: list[str] = []
    trainer_kwargs: dict = {}
    weights_kwargs: dict = {}
    model_kwargs: dict = {}
    sections = {"trainer": (config, trainer_kwargs), "weights": (config.weights, weights_kwargs),
                "model": (config.hp, model_kwargs)}
    valid = set(known_keys())
    for key, raw in entries.items():
        if key not in valid:
            problems.append(f"unknown config key {key!r}")
            continue
        section, name = key.split(".", 1)
        obj, sink = sections[section]
        try:
            sink[name] = _parse_value(raw, getattr(obj, name))
        except ValueError as err:
            problems.append(f"bad value for {key}: {err}")
    if problems:
        raise ConfigError(problems)
    new = dataclasses.replace(
        config,
        weights=dataclasses.replace(config.weights, **weights_kwargs),
        hp=dataclasses.replace(config.hp, **model_kwargs),
        **trainer_kwargs,
    )
    try:
        new.validate()
    except ValueError as err:
        raise ConfigError([str(err)]) from None
    return new


def config_entries(config: TrainingConfig) -> dict[str, str]:
    entries: dict[str, str] = {}
    for section, obj in _sections(config).items():
        for f in dataclasses.fields(obj):
            if section == "trainer" and f.name in _SKIP_TRAINER_FIELDS:
                continue
            value = getattr(obj, f.name)
            entries[f"{section}.{f.name}"] = "none" if value is None else str(value)
    return entries


def read_config_file(path) -> dict[str, str]:
    entries: dict[str, str] = {}
    problems: list[str] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            problems.append(f"{path}:{lineno}: expected 'key = value'")
            continue
        key, _, value = stripped.partition("=")
        entries[key.strip()] = value.strip()
    if problems:
        raise ConfigError(problems)
    return entries


def write_config_file(path, config: TrainingConfig) -> None:
    lines = [f"{key} = {value}" for key, value in sorted(config_entries(config).items())]
    Path(path).write_text("\n".join(lines) + "\n")
