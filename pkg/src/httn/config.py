"""Layered run configuration: defaults < config file < ``--set`` overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

COMMANDS = ("synth", "train", "eval", "ablate", "gradcheck", "dims")


@dataclass
class EvalConfig:
    episodes: int = 2000
    N: int = 5
    K: int = 5
    Q: int = 5


@dataclass
class DataConfig:
    train_manifest: str | None = None
    eval_manifest: str | None = None
    checkpoint: str | None = None


@dataclass
class SynthConfig:
    classes: int = 10
    per_class: int = 30
    T: int = 8
    M: int = 8
    C: int = 24
    num_prototypes: int = 4
    pattern: str = "permutation"
    sigma: float = 0.1
    first_class: int = 0
    pattern_seed: int = 0
    split: str = "base"


@dataclass
class AblateConfig:
    axes: dict = field(default_factory=lambda: {"moment_mode": ["GAP", "GTMT"], "adapter_mode": ["none", "TAA"]})
    dry_run: bool = False


@dataclass
class GradcheckConfig:
    T: int = 8
    M: int = 8
    C: int = 24
    tau: int = 6
    G: int = 4
    L: int = 2
    depth: int = 2
    C_M: int = 4
    N: int = 3
    K: int = 1
    Q: int = 2
    eps: float = 1e-5
    tol: float = 1e-4
    bn_tol: float = 1e-3
    inject_bug: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunSpec:
    command: str
    config: str | None = None
    out: str | None = None
    seed: int | None = None
    overrides: list = field(default_factory=list)
    force: bool = False
    deterministic: bool = False
    workers: int = 1


def _coerce(value, current, key: str):
    if current is None or isinstance(value, type(current)):
        return value
    if isinstance(current, bool):
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, float) and isinstance(value, (int, str)) and not isinstance(value, bool):
        # YAML 1.1 reads exponent forms such as 1e-5 as strings
        try:
            return float(value)
        except ValueError:
            pass
    if isinstance(current, dict) and isinstance(value, dict):
        return value
    raise ConfigError(f"{key}: expected {type(current).__name__}, got {value!r}")


def _merge(obj, updates: dict, prefix: str = "") -> None:
    if not isinstance(updates, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {updates!r}")
    known = {f.name for f in dataclasses.fields(obj)}
    for key, value in updates.items():
        dotted = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key {dotted!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, dotted + ".")
        else:
            setattr(obj, key, _coerce(value, current, dotted))


def parse_override(text: str) -> dict:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw) if raw.strip() else None
    parts = key.strip().split(".")
    out: dict = {}
    node = out
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        _merge(cfg, doc)
    for text in overrides:
        _merge(cfg, parse_override(text))
    if seed is not None:
        cfg.seed = seed
    cfg.train.seed = cfg.seed
    return cfg


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
