"""Flat ``section.key = value`` run configuration with named profiles."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .audio import AugmentConfig, ViewConfig
from .frontend import FrontendConfig
from .losses import AamConfig, DinoConfig
from .model import DinoHeadConfig, ModelConfig
from .numerics import ConfigError


@dataclass
class SupervisedConfig:
    epochs: int = 40
    batch_size: int = 512
    crop_seconds: float = 3.0
    lr_max: float = 1e-3
    lr_min: float = 5e-6
    restart_epochs: int = 8
    weight_decay: float = 5e-5
    # which DINO network seeds fine-tuning; the EMA teacher is the better encoder
    init_network: str = "teacher"

    def __post_init__(self):
        if self.init_network not in ("student", "teacher"):
            raise ConfigError(f"supervised.init_network must be student or teacher, got {self.init_network!r}")


@dataclass
class DinoTrainConfig:
    epochs: int = 80
    batch_size: int = 400
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    restart_epochs: int = 16
    weight_decay: float = 5e-5
    collapse_ratio: float = 0.1


@dataclass
class RunSection:
    profile: str = "paper"
    seed: int = 0
    log_interval: int = 10


@dataclass
class ViewSection:
    global_seconds: float = 4.0
    local_seconds: float = 2.0
    n_local: int = 5


# section name -> (dataclass, owning module, shown in --help)
SECTIONS: dict[str, tuple[type, str]] = {
    "run": (RunSection, "cli"),
    "frontend": (FrontendConfig, "frontend"),
    "model": (ModelConfig, "backbone/head"),
    "dino_head": (DinoHeadConfig, "head"),
    "aam": (AamConfig, "losses"),
    "dino": (DinoConfig, "losses"),
    "views": (ViewSection, "audio"),
    "augment": (AugmentConfig, "audio"),
    "supervised": (SupervisedConfig, "training"),
    "dino_train": (DinoTrainConfig, "training"),
}

PROFILES: dict[str, dict[str, str]] = {
    "paper": {},
    "desk": {
        "frontend.n_filters": "64",
        "model.channels": "256",
        "model.out_channels": "384",
        "model.attn_bottleneck": "32",
        "model.embed_dim": "64",
        "supervised.epochs": "10",
        "supervised.batch_size": "16",
        "supervised.restart_epochs": "10",
        "dino_train.epochs": "10",
        "dino_train.batch_size": "64",
        "dino_train.restart_epochs": "10",
    },
}


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(text: str, like: Any) -> Any:
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(like, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        if len(parts) != len(like):
            raise ConfigError(f"expected {len(like)} comma-separated values, got {text!r}")
        return tuple(_parse(p, l) for p, l in zip(parts, like))
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {type(like).__name__}") from None
    return text


def _fields(cls) -> list[dataclasses.Field]:
    return [f for f in dataclasses.fields(cls) if not dataclasses.is_dataclass(f.default)]


def _default(f: dataclasses.Field) -> Any:
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.values:
            self.values = {
                name: {f.name: _default(f) for f in _fields(cls)} for name, (cls, _) in SECTIONS.items()
            }

    @classmethod
    def from_profile(cls, profile: str = "paper") -> "RunConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        cfg = cls()
        cfg.set("run.profile", profile)
        for key, value in PROFILES[profile].items():
            cfg.set(key, value)
        return cfg

    def _split(self, key: str) -> tuple[str, str]:
        section, _, name = key.partition(".")
        if section not in self.values or name not in self.values[section]:
            raise ConfigError(f"unknown config key {key!r}")
        return section, name

    def get(self, key: str) -> Any:
        section, name = self._split(key)
        return self.values[section][name]

    def set(self, key: str, value: Any) -> None:
        section, name = self._split(key)
        current = self.values[section][name]
        self.values[section][name] = _parse(value, current) if isinstance(value, str) else value

    def update(self, overrides: dict[str, Any]) -> "RunConfig":
        for key, value in overrides.items():
            self.set(key, value)
        return self

    def apply_text(self, text: str) -> "RunConfig":
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
            key, value = line.split("=", 1)
            self.set(key.strip(), value.strip())
        return self

    def apply_file(self, path: str | Path) -> "RunConfig":
        return self.apply_text(Path(path).read_text())

    def flat(self) -> dict[str, str]:
        return {
            f"{section}.{name}": _format(value)
            for section, fields in self.values.items()
            for name, value in fields.items()
        }

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.flat().items())

    def section(self, name: str):
        cls, _ = SECTIONS[name]
        return cls(**self.values[name])

    # typed views --------------------------------------------------------

    @property
    def frontend(self) -> FrontendConfig:
        return self.section("frontend")

    @property
    def model(self) -> ModelConfig:
        return self.section("model")

    @property
    def dino_head(self) -> DinoHeadConfig:
        return self.section("dino_head")

    @property
    def aam(self) -> AamConfig:
        return self.section("aam")

    @property
    def dino(self) -> DinoConfig:
        return self.section("dino")

    @property
    def augment(self) -> AugmentConfig:
        return self.section("augment")

    @property
    def views(self) -> ViewConfig:
        v = self.values["views"]
        return ViewConfig(v["global_seconds"], v["local_seconds"], v["n_local"], self.augment)

    @property
    def supervised(self) -> SupervisedConfig:
        return self.section("supervised")

    @property
    def dino_train(self) -> DinoTrainConfig:
        return self.section("dino_train")

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]


def describe_keys() -> list[str]:
    """One line per config key: name, default and owning module."""
    lines = []
    for section, (cls, module) in SECTIONS.items():
        for f in _fields(cls):
            lines.append(f"{section}.{f.name} = {_format(_default(f))}  [{module}]")
    return lines
