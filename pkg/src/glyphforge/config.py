"""Run configuration: presets, config files and flag overrides.

Values are resolved in three layers, later ones winning: the preset, the
config file (TOML or JSON), then explicit command-line flags.
"""
from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .denoiser import DESK_CONFIG, FULL_CONFIG, DenoiserConfig
from .errors import DataIOError, InvalidConfig
from .sampling import SamplerConfig
from .training import TrainConfig
from .vectorize import TraceConfig

PRESETS = ("desk", "full")
SECTIONS = ("denoiser", "train", "sampler", "trace")


def _preset_train(preset: str) -> TrainConfig:
    if preset == "desk":
        return TrainConfig(epochs=20, batch_size=16, learning_rate=1e-3)
    return TrainConfig(epochs=3000, batch_size=16, learning_rate=1e-4)


@dataclass
class RunConfig:
    preset: str = "desk"
    denoiser: DenoiserConfig = DESK_CONFIG
    train: TrainConfig = field(default_factory=lambda: _preset_train("desk"))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)

    @classmethod
    def for_preset(cls, preset: str) -> "RunConfig":
        if preset not in PRESETS:
            raise InvalidConfig(f"unknown preset {preset!r}; choose from {PRESETS}")
        return cls(
            preset=preset,
            denoiser=DESK_CONFIG if preset == "desk" else FULL_CONFIG,
            train=_preset_train(preset),
        )

    def validate(self) -> "RunConfig":
        self.denoiser.validate()
        self.train.validate()
        self.sampler.validate(self.train.schedule["T"])
        self.trace.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "denoiser": self.denoiser.to_dict(),
            "train": self.train.to_dict(),
            "sampler": asdict(self.sampler),
            "trace": asdict(self.trace),
        }

    def with_overrides(self, overrides: Mapping[str, Mapping[str, Any]]) -> "RunConfig":
        """Replace fields section by section; ``None`` values are ignored."""
        out = self
        for section, values in overrides.items():
            if section not in SECTIONS:
                raise InvalidConfig(f"unknown config section {section!r}")
            values = {k: v for k, v in values.items() if v is not None}
            if not values:
                continue
            current = getattr(out, section)
            known = {f.name for f in fields(current)}
            unknown = sorted(set(values) - known)
            if unknown:
                raise InvalidConfig(f"unknown {section} option(s): {', '.join(unknown)}")
            if section == "denoiser":
                values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
            try:
                out = replace(out, **{section: replace(current, **values)})
            except TypeError as exc:
                raise InvalidConfig(f"bad {section} options: {exc}") from exc
        return out


def read_config_file(path: str | os.PathLike) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(raw.decode("utf-8"))
        else:
            data = json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise InvalidConfig(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidConfig(f"config {path} must hold a table at top level")
    return data


def resolve_config(
    config_path: str | os.PathLike | None = None,
    preset: str | None = None,
    overrides: Mapping[str, Mapping[str, Any]] | None = None,
    base: Mapping[str, Mapping[str, Any]] | None = None,
) -> RunConfig:
    """Preset, then ``base``, then file, then flags.

    A ``preset`` flag beats the file's preset. ``base`` sits just above the
    preset; resumed training uses it for the settings stored in the checkpoint.
    """
    data = read_config_file(config_path) if config_path is not None else {}
    unknown = sorted(set(data) - set(SECTIONS) - {"preset"})
    if unknown:
        raise InvalidConfig(f"unknown config key(s): {', '.join(unknown)}")
    chosen = preset or data.get("preset", "desk")
    cfg = RunConfig.for_preset(chosen)
    if base:
        cfg = cfg.with_overrides(base)
    cfg = cfg.with_overrides({s: data[s] for s in SECTIONS if s in data})
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg.validate()
