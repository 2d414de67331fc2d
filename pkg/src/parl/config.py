"""Experiment configuration and its on-disk key/value format.

The file format is one `key = value` per line, `#` comments, blank lines
ignored. Unknown keys are rejected outright: a typo must fail loudly, not
silently fall back to a default. Rendering and parsing round-trip losslessly
(floats via repr), so a config written by one run reproduces the next one
byte for byte.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Union

from .errors import ConfigurationError

# Env var naming the directory that relative output_dir paths resolve under.
OUTPUT_ROOT_ENV = "PARL_OUTPUT_ROOT"


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; all randomness flows from the three seeds."""

    robots: int = 3
    samples_per_task: int = 20
    fan_out: int = 2
    tau: float = 0.5
    beta: float = 0.3
    ridge_lambda: float = 1e-4
    fail_threshold: float = 0.05
    holdout_fraction: float = 0.3
    world_seed: int = 31
    augment_seed: int = 11
    protocol_seed: int = 13
    run_color_jitter: bool = True
    run_random_crop: bool = True
    include_self_labels: bool = True
    per_robot_shared: bool = False
    output_dir: str = "parl-out"

    def __post_init__(self) -> None:
        if self.robots < 1:
            raise ConfigurationError("robots must be >= 1")
        if self.samples_per_task < 1:
            raise ConfigurationError("samples_per_task must be >= 1")
        if self.fan_out < 1:
            raise ConfigurationError("fan_out must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError("tau must lie in [0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError("beta must lie in [0, 1]")
        if self.ridge_lambda < 0.0:
            raise ConfigurationError("ridge_lambda must be nonnegative")
        if self.fail_threshold <= 0.0:
            raise ConfigurationError("fail_threshold must be positive")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigurationError("holdout_fraction must lie in (0, 1)")
        for name in ("world_seed", "augment_seed", "protocol_seed"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if not self.output_dir:
            raise ConfigurationError("output_dir must be nonempty")


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _render_value(value: Union[int, float, bool, str]) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, text: str) -> Union[int, float, bool, str]:
    target = _FIELDS[name].type
    try:
        if target == "bool":
            if text not in ("true", "false"):
                raise ValueError(f"expected true/false, got {text!r}")
            return text == "true"
        if target == "int":
            return int(text)
        if target == "float":
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {name}: {exc}") from exc


def render_config(config: ExperimentConfig) -> str:
    lines = ["# experiment configuration"]
    for f in dataclasses.fields(ExperimentConfig):
        lines.append(f"{f.name} = {_render_value(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _FIELDS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value)
    return ExperimentConfig(**values)


def write_config(path, config: ExperimentConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_config(config))


def read_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
