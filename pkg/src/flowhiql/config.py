"""INI training configs: ``key = value`` lines grouped in sections.

Every :class:`TrainConfig` field belongs to exactly one section. Missing keys
take their defaults; unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .errors import ConfigError
from .hier_policy import TrainConfig

SECTIONS = {
    "algorithm": ["k", "beta", "w_max", "tau", "gamma", "polyak", "p_geom", "p_uniform", "p_final"],
    "optimization": ["lr_value", "lr_high", "lr_low", "grad_clip", "batch_size", "total_steps"],
    "model": ["policy_family", "n_coupling_layers", "flow_hidden", "value_hidden", "s_max", "t_elem"],
    "run": [
        "seed", "dataset_fraction", "eval_interval", "checkpoint_interval",
        "eval_episodes", "eval_high_noise", "eval_low_noise",
    ],
}
_DEFAULTS = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
assert sorted(sum(SECTIONS.values(), [])) == sorted(_DEFAULTS), "config sections out of sync with TrainConfig"


def _parse(key, text):
    default = _DEFAULTS[key]
    try:
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[text.lower()]
        return type(default)(text)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from exc


def _format(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_from_string(text, **overrides) -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = _parse(key, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def load_config(path, **overrides) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_string(text, **overrides)


def config_to_string(config: TrainConfig) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {_format(getattr(config, key))}" for key in keys)
        lines.append("")
    return "\n".join(lines)


def save_config(config: TrainConfig, path):
    Path(path).write_text(config_to_string(config))
