"""Experiment configuration: JSON round-trip, defaults, validation, hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import PretrainConfig
from .controller import ControllerConfig
from .errors import ConfigInvalid
from .memory import WorkingMemoryConfig
from .optim import OptimConfig
from .synthdata import DomainSpec, SplitConfig, Stripes

SUPERVISION_LEVELS = (1.0, 0.3, 0.1)


@dataclass(frozen=True)
class StaticConfig:
    n_entries: int = 4
    steps: int = 300
    lr: float = 3e-3
    weight_decay: float = 1e-4
    batch_size: int = 8

    def optim(self) -> OptimConfig:
        return OptimConfig(lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size)


@dataclass(frozen=True)
class FedConfig:
    clients: int = 4
    rounds: int = 50
    local_steps: int = 4
    lr: float = 3e-3
    weight_decay: float = 1e-4
    batch_size: int = 8

    def optim(self) -> OptimConfig:
        return OptimConfig(lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "out"
    supervision_fraction: float = 1.0
    pretrain_target_dice: float = 0.85
    data: SplitConfig = field(default_factory=SplitConfig)
    model_init_seed: int = 0
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    static: StaticConfig = field(default_factory=StaticConfig)
    working: WorkingMemoryConfig = field(default_factory=WorkingMemoryConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    topk_values: tuple[int, ...] = (1, 2, 4, 8)

    def __post_init__(self):
        if self.supervision_fraction not in SUPERVISION_LEVELS:
            raise ConfigInvalid(
                f"supervision_fraction must be one of {SUPERVISION_LEVELS}, got {self.supervision_fraction}"
            )


def _domain_to_dict(d: DomainSpec) -> dict:
    return {
        "fg_intensity": d.fg_intensity,
        "bg_intensity": d.bg_intensity,
        "noise_std": d.noise_std,
        "texture": None if d.texture is None else {"period": d.texture.period, "amplitude": d.texture.amplitude},
        "contrast_inverted": d.contrast_inverted,
        "blur_radius": d.blur_radius,
    }


def _domain_from_dict(raw: dict) -> DomainSpec:
    texture = raw.get("texture")
    return DomainSpec(
        fg_intensity=float(raw.get("fg_intensity", 0.9)),
        bg_intensity=float(raw.get("bg_intensity", 0.1)),
        noise_std=float(raw.get("noise_std", 0.02)),
        texture=None if texture is None else Stripes(float(texture["period"]), float(texture["amplitude"])),
        contrast_inverted=bool(raw.get("contrast_inverted", False)),
        blur_radius=int(raw.get("blur_radius", 0)),
    )


def _build(cls, raw: dict, converters=None):
    converters = converters or {}
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigInvalid(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        kwargs[key] = converters[key](value) if key in converters else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad {cls.__name__}: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigInvalid("config root must be a JSON object")
    raw = dict(raw)
    converters = {
        "data": lambda d: _build(
            SplitConfig,
            d,
            converters={
                "base_tasks": tuple,
                "pretrain_size_range": lambda v: tuple(float(x) for x in v),
                "pretrain_domains": lambda ds: tuple(_domain_from_dict(x) for x in ds),
                "base_domain": _domain_from_dict,
                "shift_domain": _domain_from_dict,
                "client_domains": lambda ds: tuple(_domain_from_dict(x) for x in ds),
            },
        ),
        "pretrain": lambda d: _build(PretrainConfig, d),
        "static": lambda d: _build(StaticConfig, d),
        "working": lambda d: _build(WorkingMemoryConfig, d),
        "controller": lambda d: _build(ControllerConfig, d),
        "fed": lambda d: _build(FedConfig, d),
        "topk_values": lambda v: tuple(int(k) for k in v),
    }
    return _build(ExperimentConfig, raw, converters=converters)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def convert(obj):
        if isinstance(obj, DomainSpec):
            return _domain_to_dict(obj)
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, (list, tuple)):
            return [convert(x) for x in obj]
        return obj

    out = convert(cfg)
    out["model_init_seed"] = cfg.model_init_seed
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigInvalid(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
