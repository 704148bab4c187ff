"""Experiment configuration files (YAML or JSON) with ``section.key=value`` overrides.

A config file looks like::

    architecture: mlp_10_10_10_1
    model_seed: 0
    ideal_oracle: true          # shorthand for oracle.ideal_state_mode
    confidence_output: true     # shorthand for oracle.output_mode: confidence
    oracle: {precision: binary64, noise_sigma: 4.0}
    search: {calibration_size: 200}
    head: {extra_queries: 0}
    report_path: out/report.json
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import yaml

from .extract import ExperimentConfig, ExtractionError, HeadConfig
from .oracle import OracleConfig, OracleError
from .search import SearchConfig, SearchError

SECTIONS = {"oracle": OracleConfig, "search": SearchConfig, "head": HeadConfig}
SHORTHANDS = {"ideal_oracle", "confidence_output"}


class ConfigError(ValueError):
    pass


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, value = text.split("=", 1)
    try:
        parsed = yaml.safe_load(value) if value else None
    except yaml.YAMLError as e:
        raise ConfigError(f"override {text!r}: {e}") from None
    return key.strip().split("."), parsed


def apply_overrides(data: dict, overrides) -> dict:
    data = dict(data)
    for text in overrides or ():
        path, value = parse_override(text)
        node = data
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {p} is not a section")
        node[path[-1]] = value
    return data


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    data = dict(data)
    sections = {}
    for name, cls in SECTIONS.items():
        raw = data.pop(name, None) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        unknown = set(raw) - _fields(cls)
        if unknown:
            raise ConfigError(f"unknown {name} key(s): {', '.join(sorted(unknown))}")
        sections[name] = dict(raw)
    if data.pop("ideal_oracle", None) is not None and "ideal_state_mode" not in sections["oracle"]:
        sections["oracle"]["ideal_state_mode"] = True
    conf = data.pop("confidence_output", None)
    if conf is not None and "output_mode" not in sections["oracle"]:
        sections["oracle"]["output_mode"] = "confidence" if conf else "hard-label"
    unknown = set(data) - _fields(ExperimentConfig)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}")
    try:
        built = {name: cls(**sections[name]) for name, cls in SECTIONS.items()}
        return ExperimentConfig(**data, **built)
    except (TypeError, OracleError, SearchError, ExtractionError) as e:
        raise ConfigError(str(e)) from None


def load_config(path=None, overrides=()) -> ExperimentConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as e:
            raise ConfigError(f"cannot read {path}: {e.strerror}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
    return config_from_dict(apply_overrides(data, overrides))


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(dataclasses.asdict(config), sort_keys=False))
