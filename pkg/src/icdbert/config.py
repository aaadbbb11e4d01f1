"""Run configuration: ``section.key = value`` text files with typed defaults.

Every key has a default below. A config file may set any subset; command
line options override the file. The effective configuration written next to
each command's outputs lists every key, so feeding it back reproduces the run.
"""

from __future__ import annotations

import os
from pathlib import Path

DEFAULTS: dict[str, object] = {
    "run.seed": 7,
    "fixture.out": "",
    "fixture.admissions": 200,
    "fixture.codes": 40,
    "fixture.zipf": 1.1,
    "prepare.corpus": "data",
    "prepare.out": "prepared",
    "prepare.top_k": 10,
    "prepare.ratio": 0.8,
    "prepare.group_by_admission": False,
    "prepare.lenient": False,
    "prepare.categories": "",
    "prepare.diagnosis_descriptors": "",
    "prepare.procedure_descriptors": "",
    "tokenize.prepared": "prepared",
    "tokenize.out": "tokens",
    "tokenize.vocab": "",
    "tokenize.max_len": 0,
    "model.preset": "desk",
    "model.dropout": 0.1,
    "train.tokens": "tokens",
    "train.out": "run",
    "train.lr": 3e-5,
    "train.epochs": 6,
    "train.steps": 0,
    "train.stop_after": 0,
    "train.batch_size": 16,
    "train.eval_every": 10,
    "train.accumulation_steps": 1,
    "train.schedule": "constant",
    "train.warmup_steps": 0,
    "train.wall_time": False,
    "eval.run": "run",
    "eval.tokens": "tokens",
    "eval.prepared": "prepared",
    "eval.checkpoint": "",
    "eval.split": "test",
    "eval.threshold": 0.5,
    "eval.out": "eval",
    "eda.prepared": "prepared",
    "eda.out": "eda",
}

CHOICES = {
    "model.preset": ("desk", "paper"),
    "train.schedule": ("constant", "linear"),
    "eval.split": ("train", "test"),
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw) -> object:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return str(raw)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def load_config_file(path: str | os.PathLike) -> dict[str, object]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> dict[str, object]:
    """Defaults, then file values, then non-None overrides; validated."""
    config = dict(DEFAULTS)
    config.update(file_values or {})
    for key, value in (overrides or {}).items():
        if value is not None:
            config[key] = _coerce(key, value)
    validate(config)
    return config


def validate(config: dict[str, object]) -> None:
    for key, allowed in CHOICES.items():
        if config[key] not in allowed:
            raise ConfigError(f"{key}: {config[key]!r} is not one of {allowed}")
    positive = (
        "fixture.admissions", "fixture.codes", "prepare.top_k", "train.epochs",
        "train.batch_size", "train.eval_every", "train.accumulation_steps",
    )
    for key in positive:
        if config[key] < 1:
            raise ConfigError(f"{key} must be >= 1")
    for key in ("train.steps", "train.stop_after", "train.warmup_steps", "tokenize.max_len"):
        if config[key] < 0:
            raise ConfigError(f"{key} must be >= 0")
    if config["tokenize.max_len"] and config["tokenize.max_len"] < 3:
        raise ConfigError("tokenize.max_len must be 0 (preset) or >= 3")
    if not 0 < config["prepare.ratio"] < 1:
        raise ConfigError("prepare.ratio must lie strictly between 0 and 1")
    if not 0 < config["eval.threshold"] < 1:
        raise ConfigError("eval.threshold must lie strictly between 0 and 1")
    if not 0 <= config["model.dropout"] < 1:
        raise ConfigError("model.dropout must lie in [0, 1)")
    if config["train.lr"] < 0:
        raise ConfigError("train.lr must be >= 0")
    if config["fixture.zipf"] <= 0:
        raise ConfigError("fixture.zipf must be positive")


def _format(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(config: dict[str, object]) -> str:
    return "".join(f"{key} = {_format(config[key])}\n" for key in sorted(config))


def write_config(directory: str | os.PathLike, config: dict[str, object]) -> Path:
    path = Path(directory) / "config.txt"
    path.write_text(dump_config(config), encoding="utf-8")
    return path
