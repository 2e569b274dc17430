"""One JSON config file drives a whole experiment; CLI flags override it.

Validation happens before any compute and reports the offending field path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .data import DomainSpec
from .model import ConvSpec, NetConfig, PoolSpec, default_backbone
from .rng import derive_seed
from .trainer import TrainConfig

__all__ = ["ConfigError", "BackboneConfig", "ScoreConfig", "ExperimentConfig",
           "parse_lambda_ps", "default_experiment"]

_DOMAIN_SEED_TAG = 0x646F6D00
_PRETRAIN_SEED_TAG = 0x70726531


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the field path."""


@dataclass
class BackboneConfig:
    """How the frozen shared kernels are produced.

    Pretraining runs an unmasked single-head backbone on the concatenation of
    the listed generator domains (label spaces offset), standing in for the
    diverse corpus the shared weights would normally come from.
    """

    init: str = "pretrain"          # "pretrain" | "random"
    pretrain_epochs: int = 4
    pretrain_lr: float = 0.01
    pretrain_domains: Optional[list] = None

    def validate(self):
        if self.init not in ("pretrain", "random"):
            raise ConfigError(f"backbone.init: must be pretrain|random, got {self.init!r}")
        if self.init == "pretrain":
            if self.pretrain_epochs < 1:
                raise ConfigError("backbone.pretrain_epochs: must be >= 1")
            if not self.pretrain_domains:
                raise ConfigError("backbone.pretrain_domains: required for pretrain init")
        return self


@dataclass
class ScoreConfig:
    """S-score constants; data, never hard-coded."""

    gamma: float = 2.0
    cap: float = 1000.0
    max_errors: Optional[list] = None  # default: 1.0 per domain

    def validate(self, num_domains: int):
        if self.gamma <= 0 or self.cap <= 0:
            raise ConfigError("score.gamma and score.cap must be positive")
        if self.max_errors is not None:
            if len(self.max_errors) != num_domains:
                raise ConfigError(
                    f"score.max_errors: expected {num_domains} entries")
            if any(not 0 < e <= 1 for e in self.max_errors):
                raise ConfigError("score.max_errors: entries must be in (0,1]")
        return self


@dataclass
class ExperimentConfig:
    net: NetConfig
    train: TrainConfig
    domains: list
    backbone: BackboneConfig
    score: ScoreConfig = field(default_factory=ScoreConfig)

    def validate(self):
        try:
            self.net.validate()
            self.train.validate()
            for spec in self.domains:
                spec.validate()
            self.backbone.validate()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.net.num_domains != len(self.domains):
            raise ConfigError(
                f"domains: {len(self.domains)} specs for "
                f"{self.net.num_domains} net domains")
        for i, spec in enumerate(self.domains):
            if self.net.class_counts[i] != spec.classes:
                raise ConfigError(
                    f"domains[{i}].classes: {spec.classes} != net class count "
                    f"{self.net.class_counts[i]}")
            if spec.image_size != self.net.image_size:
                raise ConfigError(
                    f"domains[{i}].image_size: {spec.image_size} != "
                    f"net.image_size {self.net.image_size}")
        self.score.validate(len(self.domains))
        return self

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        train = {k: v for k, v in vars(self.train).items()}
        train["decay_epochs"] = list(self.train.decay_epochs)
        return {
            "seed": self.train.seed,
            "net": {
                "image_size": self.net.image_size,
                "in_channels": self.net.in_channels,
                "tau": self.net.tau,
                "layers": self.net.to_dict()["layers"],
            },
            "domains": [d.to_dict() for d in self.domains],
            "train": train,
            "backbone": {
                "init": self.backbone.init,
                "pretrain_epochs": self.backbone.pretrain_epochs,
                "pretrain_lr": self.backbone.pretrain_lr,
                "pretrain_domains": ([d.to_dict() for d in self.backbone.pretrain_domains]
                                     if self.backbone.pretrain_domains else None),
            },
            "score": {"gamma": self.score.gamma, "cap": self.score.cap,
                      "max_errors": self.score.max_errors},
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        seed = int(raw.get("seed", 0))
        dom_raw = raw.get("domains")
        if not dom_raw:
            raise ConfigError("domains: at least one domain is required")
        domains = []
        for i, d in enumerate(dom_raw):
            d = dict(d)
            d.setdefault("seed", derive_seed(seed, _DOMAIN_SEED_TAG, i))
            try:
                domains.append(DomainSpec(**d))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"domains[{i}]: {exc}") from exc
        net_raw = dict(raw.get("net", {}))
        layer_dicts = net_raw.pop("layers", None)
        if layer_dicts is None:
            layers = default_backbone()
        else:
            layers = []
            for i, entry in enumerate(layer_dicts):
                entry = dict(entry)
                kind = entry.pop("kind", None)
                try:
                    if kind == "conv":
                        layers.append(ConvSpec(**entry))
                    elif kind == "pool":
                        layers.append(PoolSpec(**entry))
                    else:
                        raise ConfigError(
                            f"net.layers[{i}].kind: unknown kind {kind!r}")
                except TypeError as exc:
                    raise ConfigError(f"net.layers[{i}]: {exc}") from exc
        try:
            net = NetConfig(
                layers=layers, num_domains=len(domains),
                class_counts=[d.classes for d in domains],
                in_channels=int(net_raw.get("in_channels", 3)),
                image_size=int(net_raw.get("image_size", 32)),
                tau=float(net_raw.get("tau", 0.0)))
        except ValueError as exc:
            raise ConfigError(f"net: {exc}") from exc
        train_raw = dict(raw.get("train", {}))
        train_raw.setdefault("seed", seed)
        if "decay_epochs" in train_raw:
            train_raw["decay_epochs"] = tuple(train_raw["decay_epochs"])
        try:
            train = TrainConfig(**train_raw)
        except TypeError as exc:
            raise ConfigError(f"train: {exc}") from exc
        bb_raw = dict(raw.get("backbone", {}))
        pre_raw = bb_raw.pop("pretrain_domains", None)
        if pre_raw is None and bb_raw.get("init", "pretrain") == "pretrain":
            # diverse default corpus: one slice of each generator family
            pre_raw = [
                {"kind": "shapes", "classes": 6, "train_count": 180},
                {"kind": "textures", "classes": 6, "train_count": 180},
                {"kind": "glyphs", "classes": 6, "train_count": 180},
            ]
        pretrain_domains = None
        if pre_raw is not None:
            pretrain_domains = []
            for i, entry in enumerate(pre_raw):
                entry = dict(entry)
                entry.setdefault("seed", derive_seed(seed, _PRETRAIN_SEED_TAG, i))
                entry.setdefault("val_count", 1)
                entry.setdefault("test_count", 1)
                entry.setdefault("image_size", net.image_size)
                try:
                    pretrain_domains.append(DomainSpec(**entry))
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"backbone.pretrain_domains[{i}]: {exc}") from exc
        try:
            backbone = BackboneConfig(pretrain_domains=pretrain_domains, **bb_raw)
        except TypeError as exc:
            raise ConfigError(f"backbone: {exc}") from exc
        score_raw = dict(raw.get("score", {}))
        try:
            score = ScoreConfig(**score_raw)
        except TypeError as exc:
            raise ConfigError(f"score: {exc}") from exc
        return cls(net=net, train=train, domains=domains, backbone=backbone,
                   score=score).validate()

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def apply_overrides(self, budget: Optional[float] = None,
                        sharing: Optional[str] = None,
                        lambda_ps: Optional[str] = None,
                        seed: Optional[int] = None,
                        epochs: Optional[int] = None) -> "ExperimentConfig":
        if budget is not None:
            self.train.budget = budget
        if sharing is not None:
            self.train.sharing = sharing
        if lambda_ps is not None:
            mode, value = parse_lambda_ps(lambda_ps)
            self.train.lambda_ps_mode = mode
            if value is not None:
                self.train.lambda_ps_value = value
        if seed is not None:
            self.train.seed = seed
        if epochs is not None:
            self.train.epochs = epochs
            if self.train.decay_epochs and self.train.decay_epochs[-1] >= epochs:
                self.train.decay_epochs = tuple(
                    e for e in self.train.decay_epochs if e < epochs)
        return self.validate()


def parse_lambda_ps(text: str) -> tuple[str, Optional[float]]:
    """Parse the --lambda-ps-mode flag: 'learned' or 'fixed:<value>'."""
    if text == "learned":
        return "learned", None
    if text.startswith("fixed"):
        _, _, rest = text.partition(":")
        if not rest:
            return "fixed", None
        try:
            return "fixed", float(rest)
        except ValueError as exc:
            raise ConfigError(f"--lambda-ps-mode: bad fixed value {rest!r}") from exc
    raise ConfigError(
        f"--lambda-ps-mode: expected learned or fixed:<v>, got {text!r}")


def default_experiment(num_domains: int = 3, seed: int = 7) -> ExperimentConfig:
    """The stock 3-domain desk-scale experiment."""
    kinds = ["shapes", "textures", "glyphs", "noisy-digits"]
    domains = [{"kind": kinds[i % len(kinds)], "classes": 4}
               for i in range(num_domains)]
    return ExperimentConfig.from_dict({"seed": seed, "domains": domains})
