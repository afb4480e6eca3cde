"""Run configuration: one YAML file plus ``--set section.key=value`` overrides.

Component seeds default to the root ``seed`` so a single number pins a run;
a component section may still override its own seed.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from .data.synth import SynthConfig
from .metrics import VesselnessConfig
from .registration.keypoints import DetectorConfig
from .registration.pipeline import RegistrationConfig
from .registration.ransac import RansacConfig
from .trainer import TrainConfig

SECTIONS = ("synth", "train", "detector", "ransac", "vesselness", "registration", "data", "paths")
SEEDED = ("synth", "train", "ransac")


class ConfigError(ValueError):
    pass


def _dataclass_to_dict(obj) -> dict:
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    from dataclasses import asdict

    d = asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class RunConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    vesselness: VesselnessConfig = field(default_factory=VesselnessConfig)
    binarize_threshold: float = 0.5
    raw: bool = False
    # Size of the fixed image after preprocessing; None keeps images as they are.
    preprocess_size: Optional[int] = 256
    detector_weights: str = "classical"
    backbone: str = "small"

    @property
    def registration(self) -> RegistrationConfig:
        return RegistrationConfig(detector=self.detector, ransac=self.ransac,
                                  binarize_threshold=self.binarize_threshold, raw=self.raw)

    @classmethod
    def from_dict(cls, raw: Optional[dict]) -> "RunConfig":
        raw = copy.deepcopy(raw or {})
        unknown = set(raw) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        seed = int(raw.get("seed", 0))
        sec = {name: dict(raw.get(name) or {}) for name in SECTIONS}
        for name in SEEDED:
            sec[name].setdefault("seed", seed)
        reg = sec["registration"]
        data = sec["data"]
        paths = sec["paths"]
        train = sec["train"]
        train.setdefault("backbone", paths.get("backbone", "small"))
        try:
            return cls(
                seed=seed,
                synth=SynthConfig(**sec["synth"]),
                train=TrainConfig(**train),
                detector=DetectorConfig(**sec["detector"]),
                ransac=RansacConfig(**sec["ransac"]),
                vesselness=VesselnessConfig(**sec["vesselness"]),
                binarize_threshold=float(reg.pop("binarize_threshold", 0.5)),
                raw=bool(reg.pop("raw", False)),
                preprocess_size=data.pop("preprocess_size", 256),
                detector_weights=str(paths.pop("detector_weights", "classical")),
                backbone=str(train["backbone"]),
            )
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path: Optional[Path], overrides: Sequence[str] = ()) -> "RunConfig":
        raw: dict = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise FileNotFoundError(f"config file {path} not found")
            raw = yaml.safe_load(path.read_text()) or {}
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
        for item in overrides:
            apply_override(raw, item)
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "synth": _dataclass_to_dict(self.synth),
            "train": _dataclass_to_dict(self.train),
            "detector": _dataclass_to_dict(self.detector),
            "ransac": _dataclass_to_dict(self.ransac),
            "vesselness": _dataclass_to_dict(self.vesselness),
            "registration": {"binarize_threshold": self.binarize_threshold, "raw": self.raw},
            "data": {"preprocess_size": self.preprocess_size},
            "paths": {"detector_weights": self.detector_weights, "backbone": self.backbone},
        }

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def apply_override(raw: dict, item: str) -> None:
    """Apply ``a.b.c=value`` in place; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    node: Any = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r}: {p} is not a section")
    node[parts[-1]] = yaml.safe_load(value)
