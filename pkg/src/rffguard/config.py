"""Experiment configuration: YAML in, nested dataclasses out, sha256 digests for caching."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .classifier import WatermarkTrainConfig
from .frontend import FrontendConfig
from .guard import GuardTrainConfig
from .rf_sim import DatasetConfig
from .tensor_nn import SpecAugConfig, TrainHyper


@dataclass
class ClassifierConfig:
    preset: str = "mini_resnet"
    epochs: int = 20
    key_seed: int = 7
    hyper: TrainHyper = field(default_factory=lambda: TrainHyper(learning_rate=1e-3))
    wm: WatermarkTrainConfig = field(default_factory=WatermarkTrainConfig)
    aug: SpecAugConfig = field(default_factory=SpecAugConfig)
    # reference models trained alongside the watermarked one
    train_baseline: bool = True
    train_plain_trigger: bool = True


@dataclass
class VerifyConfig:
    probe_count: int = 200
    sanitize: list = field(default_factory=lambda: [["gaussian_blur", {"sigma": 1.0}], ["noise", {"sigma": 0.05}]])
    wrong_keys: int = 100


def _default_attacks() -> list:
    return [
        {"kind": "prune", "rho": 0.3},
        {"kind": "quantize", "bits": 8},
        {"kind": "finetune", "epochs": 3, "lr": 1e-4},
        {"kind": "sanitize", "steps": [["gaussian_blur", {"sigma": 1.0}], ["noise", {"sigma": 0.05}]]},
        {"kind": "evade", "eps": 0.25, "steps": 10},
    ]


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    guard: GuardTrainConfig = field(default_factory=lambda: GuardTrainConfig.for_preset("robust"))
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    attacks: list = field(default_factory=_default_attacks)
    out_dir: str = "runs/desk"

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        """Content hash of everything except the output location."""
        d = self.to_dict()
        d.pop("out_dir")
        return digest_of(d)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        if "dataset" in d:
            kw["dataset"] = _build(DatasetConfig, d["dataset"])
        if "frontend" in d:
            kw["frontend"] = _build(FrontendConfig, d["frontend"])
        if "classifier" in d:
            c = dict(d["classifier"])
            sub = {}
            if "hyper" in c:
                sub["hyper"] = _build(TrainHyper, {"learning_rate": 1e-3, **c.pop("hyper")})
            if "wm" in c:
                sub["wm"] = _build(WatermarkTrainConfig, c.pop("wm"))
            if "aug" in c:
                sub["aug"] = _build(SpecAugConfig, c.pop("aug"))
            kw["classifier"] = _build(ClassifierConfig, {**c, **sub})
        if "guard" in d:
            g = dict(d["guard"])
            kw["guard"] = GuardTrainConfig.for_preset(g.pop("preset", "robust"), **g)
        if "verify" in d:
            kw["verify"] = _build(VerifyConfig, d["verify"])
        for k in ("seed", "attacks", "out_dir"):
            if k in d:
                kw[k] = d[k]
        return cls(**kw)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


def _build(cls, d):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, float) and x != x:
        return None
    return x


def digest_of(obj) -> str:
    raw = json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(raw.encode()).hexdigest()
