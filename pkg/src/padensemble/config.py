"""Run-configuration document: parsing, validation and serialization."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .augment import PLACEMENTS, JitterSpec
from .model import DEFAULT_BACKBONES, BackboneSpec, EnsembleSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PaddingOverrides:
    fill_value: Tuple[int, int, int] = (255, 255, 255)
    placement: str = "center"
    target_height: Optional[int] = None
    target_width: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "fill_value", tuple(int(v) for v in self.fill_value))
        if len(self.fill_value) != 3 or any(not 0 <= v <= 255 for v in self.fill_value):
            raise ConfigError(f"padding.fill_value must be 3 values in [0, 255], got {self.fill_value}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"padding.placement must be one of {PLACEMENTS}")
        if (self.target_height is None) != (self.target_width is None):
            raise ConfigError("padding.target_height and padding.target_width must be set together")
        if self.target_height is not None and (self.target_height < 1 or self.target_width < 1):
            raise ConfigError("padding target must be positive")

    def target(self) -> Optional[Tuple[int, int]]:
        if self.target_height is None:
            return None
        return self.target_height, self.target_width


@dataclass(frozen=True)
class EnsembleConfig:
    backbones: Tuple[str, ...] = DEFAULT_BACKBONES
    pretrained: bool = True
    averaging: str = "probabilities"

    def __post_init__(self) -> None:
        object.__setattr__(self, "backbones", tuple(self.backbones))
        if not self.backbones:
            raise ConfigError("ensemble.backbones must name at least one backbone")
        if self.averaging not in ("probabilities", "logits"):
            raise ConfigError("ensemble.averaging must be 'probabilities' or 'logits'")

    def spec(self) -> EnsembleSpec:
        # tiny_test_net has no pretrained weights by construction
        return EnsembleSpec(
            tuple(BackboneSpec(n, self.pretrained and n != "tiny_test_net") for n in self.backbones)
        )


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 100
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 8
    selection_mode: str = "validation_loss"
    validation_fraction: float = 0.2


@dataclass(frozen=True)
class AblationSection:
    seeds: Tuple[int, ...] = (0, 1, 2)
    holdout_fraction: float = 0.25

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("ablation.seeds must not be empty")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError("ablation.holdout_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class RunConfig:
    dataset_root: str = "data"
    output_dir: str = "runs/default"
    seed: int = 0
    padding: PaddingOverrides = field(default_factory=PaddingOverrides)
    jitter: JitterSpec = field(default_factory=JitterSpec)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    train: TrainSection = field(default_factory=TrainSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def __post_init__(self) -> None:
        try:
            self.train_config()
            self.ensemble.spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **asdict(self.train))

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["padding"]["fill_value"] = list(self.padding.fill_value)
        d["ensemble"]["backbones"] = list(self.ensemble.backbones)
        d["ablation"]["seeds"] = list(self.ablation.seeds)
        return d

    @classmethod
    def from_dict(cls, doc: Optional[Dict[str, Any]]) -> "RunConfig":
        doc = dict(doc or {})
        sections = {
            "padding": PaddingOverrides,
            "jitter": JitterSpec,
            "ensemble": EnsembleConfig,
            "train": TrainSection,
            "ablation": AblationSection,
        }
        _reject_unknown(doc, {f.name for f in fields(cls)}, "config")
        kwargs: Dict[str, Any] = {}
        for key, value in doc.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be a mapping")
                _reject_unknown(value, {f.name for f in fields(sections[key])}, key)
                try:
                    kwargs[key] = sections[key](**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{key}: {exc}") from exc
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def with_overrides(self, **overrides) -> "RunConfig":
        """Apply flag-style overrides; ``None`` values are ignored."""
        top, train, ens = {}, {}, {}
        for key, value in overrides.items():
            if value is None:
                continue
            if key in ("seed", "output_dir", "dataset_root"):
                top[key] = value
            elif key in ("epochs", "learning_rate", "momentum", "batch_size", "selection_mode"):
                train[key] = value
            elif key in ("backbones", "pretrained", "averaging"):
                ens[key] = value
            elif key == "members":
                ens["members"] = value
            else:
                raise ConfigError(f"unknown override {key!r}")
        ensemble = self.ensemble
        if "members" in ens:
            n = int(ens.pop("members"))
            if n < 1:
                raise ConfigError("--members must be >= 1")
            names = tuple(ens.get("backbones", ensemble.backbones))
            ens["backbones"] = tuple(names[i % len(names)] for i in range(n))
        if ens:
            ensemble = replace(ensemble, **ens)
        try:
            return replace(self, ensemble=ensemble, train=replace(self.train, **train), **top)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _reject_unknown(doc: Dict[str, Any], allowed, where: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(doc)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)
