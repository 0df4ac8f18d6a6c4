"""Run configuration, named presets and YAML (de)serialization."""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attacks import AttackConfig, l2_budget
from .defense import DefenseConfig
from .model import ViTConfig
from .pretrain import FinetuneConfig, PretrainConfig

STAGES = ("pretrain", "finetune", "attack", "cluster", "train-prompts", "evaluate", "analyze", "report")

LINF_EPSILONS = [0.5 / 255, 1 / 255, 2 / 255, 4 / 255, 8 / 255]
L2_PER_PIXEL = [0.001, 0.005]


@dataclass
class DataConfig:
    source: str = "cifar10"  # "cifar10" or "synthetic"
    path: str = "data/cifar-10-batches-bin"
    train_limit: int | None = None
    test_limit: int | None = None
    synthetic_train: int = 5000
    synthetic_test: int = 1000


@dataclass
class EvalConfig:
    samples: int = 1000
    batch_size: int = 100
    analysis_batch: int = 256
    sweep_radii: list = field(default_factory=lambda: [2, 4, 8, 16, "all"])
    cka_tokens: int = 8


@dataclass
class RunConfig:
    stage: str = "evaluate"
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ViTConfig = field(default_factory=ViTConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    attacks: list[AttackConfig] = field(default_factory=list)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        nested = {
            "data": DataConfig, "model": ViTConfig, "pretrain": PretrainConfig,
            "finetune": FinetuneConfig, "defense": DefenseConfig, "eval": EvalConfig,
        }
        kw = {}
        for key, value in d.items():
            if key in nested:
                if "perceptual_layers" in value:
                    value["perceptual_layers"] = tuple(value["perceptual_layers"])
                kw[key] = nested[key](**value)
            elif key == "attacks":
                kw[key] = [AttackConfig(**a) for a in value]
            else:
                kw[key] = value
        return cls(**kw)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def default_attacks(image_shape=(3, 32, 32)) -> list[AttackConfig]:
    """PGD/BIM/MIM at every l-inf budget and both l2 budgets, plus C&W."""
    out = []
    for eps in LINF_EPSILONS:
        for kind in ("pgd", "bim", "mim"):
            out.append(AttackConfig(kind=kind, norm="linf", epsilon=eps, steps=20))
    for per_pixel in L2_PER_PIXEL:
        eps = l2_budget(per_pixel, *image_shape)
        for kind in ("pgd", "bim", "mim"):
            out.append(AttackConfig(kind=kind, norm="l2", epsilon=eps, steps=20))
    out.append(AttackConfig(kind="cw", norm="l2", epsilon=0.0, random_start=False))
    return out


def _desk_cifar() -> RunConfig:
    return RunConfig(
        out="runs/desk-cifar",
        model=ViTConfig(),
        pretrain=PretrainConfig(epochs=100, warmup_epochs=10, base_lr=1.5e-4, batch_size=256),
        finetune=FinetuneConfig(epochs=100, warmup_epochs=5, base_lr=1e-3, batch_size=128),
        attacks=default_attacks(),
        defense=DefenseConfig(n_clusters=64, epochs=100, warmup_epochs=5, base_lr=1e-3, batch_size=128),
    )


def _paper_imagenet() -> RunConfig:
    return RunConfig(
        out="runs/paper-imagenet",
        data=DataConfig(source="imagenet", path="data/imagenet"),
        model=ViTConfig(image_size=224, patch_size=16, depth=12, width=768, heads=12, num_classes=1000,
                        decoder_depth=8, decoder_width=512, decoder_heads=16),
        pretrain=PretrainConfig(epochs=800, warmup_epochs=40, base_lr=1.5e-4, batch_size=4096,
                                perceptual_layers=(3, 6, 9, 12)),
        finetune=FinetuneConfig(epochs=100, warmup_epochs=5, base_lr=5e-4, batch_size=1024),
        attacks=[AttackConfig(kind=k, norm="linf", epsilon=e, steps=20)
                 for e in LINF_EPSILONS for k in ("pgd", "bim", "mim")],
        defense=DefenseConfig(n_clusters=1000, epochs=100, warmup_epochs=5, base_lr=1e-3, batch_size=1024),
        eval=EvalConfig(samples=50000, analysis_batch=256, sweep_radii=[14, 28, 56, 112, "all"]),
    )


def _smoke() -> RunConfig:
    """Minutes-scale synthetic run exercising every stage."""
    return RunConfig(
        out="runs/smoke",
        data=DataConfig(source="synthetic", synthetic_train=512, synthetic_test=128),
        model=ViTConfig(image_size=32, patch_size=8, depth=2, width=32, heads=2,
                        decoder_depth=1, decoder_width=32, decoder_heads=2),
        pretrain=PretrainConfig(epochs=2, warmup_epochs=1, base_lr=1e-3, batch_size=128,
                                perceptual_layers=(1, 2)),
        finetune=FinetuneConfig(epochs=3, warmup_epochs=1, base_lr=2e-3, batch_size=128),
        attacks=[AttackConfig(kind="pgd", norm="linf", epsilon=2 / 255, steps=5),
                 AttackConfig(kind="pgd", norm="linf", epsilon=0.0, steps=5)],
        defense=DefenseConfig(n_clusters=4, epochs=2, warmup_epochs=1, base_lr=1e-2, batch_size=128,
                              kmeans_sweeps=3),
        eval=EvalConfig(samples=64, batch_size=64, analysis_batch=32, cka_tokens=4),
    )


PRESETS = {"desk-cifar": _desk_cifar, "paper-imagenet": _paper_imagenet, "smoke": _smoke}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, preset_name: str | None = None, **overrides) -> RunConfig:
    base = preset(preset_name or "desk-cifar").to_dict()
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: config must be a mapping")
        base = _merge(base, loaded)
    base = _merge(base, {k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(base)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
