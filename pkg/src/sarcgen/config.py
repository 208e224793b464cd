"""Run configuration: an INI file with one section per component.

Example::

    [train]
    epochs = 20
    batch_size = 16

    [loss]
    lambda_cl = 0.5
    lambda_ppo_end_step = auto

Unknown sections or keys are rejected; anything omitted takes its default.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .generator import ModelConfig
from .losses import LambdaSchedule, LossWeights
from .prompts import PromptConfig
from .training import TrainConfig


@dataclass
class DecodeConfig:
    k: int = 5
    max_len: int = 64
    sampling: bool = False
    sample_seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k", "must be >= 1")
        if self.max_len < 1:
            raise ConfigError("max_len", "must be >= 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, max_tokens=self.train.max_tokens)


# model.max_tokens follows train.max_tokens and is not set directly
_HIDDEN = {"model": {"max_tokens"}}
_SCHEDULE_KEYS = {
    "lambda_ppo_start": "start_value",
    "lambda_ppo_end": "end_value",
    "lambda_ppo_start_step": "start_step",
    "lambda_ppo_end_step": "end_step",
}


def _flat(section: str, obj) -> dict:
    values = {}
    for f in dataclasses.fields(obj):
        if f.name in _HIDDEN.get(section, ()):
            continue
        value = getattr(obj, f.name)
        if isinstance(value, LambdaSchedule):
            for key, attr in _SCHEDULE_KEYS.items():
                values[key] = getattr(value, attr)
        else:
            values[f.name] = value
    return values


def config_to_dict(config: RunConfig) -> dict:
    return {f.name: _flat(f.name, getattr(config, f.name)) for f in dataclasses.fields(config)}


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if key.endswith("lambda_ppo_end_step"):
            return None if raw.lower() in ("auto", "none", "") else int(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        kind = "bool" if isinstance(default, bool) else type(default).__name__ if default is not None else "int"
        raise ConfigError(key, f"expected {kind}, got {raw!r}") from None
    return raw


def _build(section: str, cls, values: dict):
    kwargs = dict(values)
    try:
        if cls is LossWeights:
            sched = {attr: kwargs.pop(key) for key, attr in _SCHEDULE_KEYS.items() if key in kwargs}
            kwargs["lambda_ppo"] = LambdaSchedule(**{**dataclasses.asdict(LambdaSchedule()), **sched})
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{section}.{exc.key}", str(exc).split(": ", 1)[-1]) from None


def config_from_dict(data: dict) -> RunConfig:
    defaults = config_to_dict(RunConfig())
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    built = {}
    for section, f in sections.items():
        given = data.get(section, {})
        values = {}
        for key, raw in given.items():
            if key not in defaults[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            default = defaults[section][key]
            values[key] = _coerce(f"{section}.{key}", raw, default) if isinstance(raw, str) else raw
        built[section] = _build(section, f.default_factory().__class__, values)
    for section in data:
        if section not in sections:
            raise ConfigError(section, "unknown section")
    return RunConfig(**built)


def parse_config_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("", f"cannot parse config: {exc}") from None
    return config_from_dict({s: dict(parser.items(s)) for s in parser.sections()})


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("", f"config file {path} not found")
    return parse_config_text(path.read_text(encoding="utf-8"))


def _render(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def config_to_ini(config: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in config_to_dict(config).items():
        parser[section] = {k: _render(v) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
