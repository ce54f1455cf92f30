"""Run configuration: per-stage dataclasses, named profiles, TOML round-trip."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import tomli
import tomli_w

PROFILES = ("synthetic", "office-home", "domainnet-126")


@dataclass
class DataConfig:
    source_root: str = ""
    target_root: str = ""
    image_size: int = 32
    # synthetic generator
    n_classes: int = 5
    per_class: int = 40
    seed: int = 0
    hue_degrees: float = 60.0
    noise_sigma: float = 0.06
    background_texture: bool = True


@dataclass
class BaseConfig:
    """Base DANN-style model. The optimizer family is not given by the method
    description; Adam is used throughout."""

    backbone: str = "small"  # small | resnet34
    pretrained: bool = False
    feature_dim: int = 32
    addon_hidden: int = 32
    discriminator_hidden: int = 64
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 32
    reversal_max: float = 1.0
    reversal_gamma: float = 10.0
    optimizer: str = "adam"
    flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in ("small", "resnet34"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.epochs < 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0 and lr > 0")


@dataclass
class TrainConfig:
    """Interpretive-model schedule and loss weights.

    ``alpha``, ``beta``, ``gamma`` weight the cluster, separation and fidelity
    terms of the prototype stage; ``lam`` weights the L1 penalty of the
    last-layer stage.
    """

    alpha: float = 0.8
    beta: float = 10.0
    gamma: float = 100.0
    lam: float = 1e-4
    lr: float = 0.003
    epochs: int = 100
    push_every: int = 10
    last_layer_iters: int = 20
    K: int = 10
    seed: int = 0
    batch_size: int = 32
    batch_mix: float = 1.0
    cls_source_weight: float = 1.0
    cls_target_weight: float = 1.0
    epsilon: float = 1e-4
    train_addon: bool = True
    feature_activation: str = "sigmoid"  # sigmoid | none, applied after the interpretive add-on copy
    flip: bool = True
    optimizer: str = "adam"

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lam must be non-negative")
        if self.push_every <= 0 or self.epochs < 0 or self.epochs % self.push_every:
            raise ValueError(f"push_every={self.push_every} must divide epochs={self.epochs}")
        if self.feature_activation not in ("sigmoid", "none"):
            raise ValueError(f"unknown feature_activation {self.feature_activation!r}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class ExplainConfig:
    m: int = 3
    tau: float = 0.1
    percentile: float = 95.0


@dataclass
class InspectConfig:
    cumulative: bool = True
    categories: list[str] = field(default_factory=list)


@dataclass
class RunConfig:
    profile: str = "synthetic"
    data: DataConfig = field(default_factory=DataConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    interp: TrainConfig = field(default_factory=TrainConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    inspect: InspectConfig = field(default_factory=InspectConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


_SECTIONS = {"data": DataConfig, "base": BaseConfig, "interp": TrainConfig,
             "explain": ExplainConfig, "inspect": InspectConfig}


def profile_defaults(profile: str) -> RunConfig:
    if profile == "synthetic":
        return RunConfig(profile=profile, interp=TrainConfig(gamma=10.0))
    if profile in ("office-home", "domainnet-126"):
        gamma = 100.0 if profile == "office-home" else 10.0
        return RunConfig(
            profile=profile,
            data=DataConfig(image_size=224),
            base=BaseConfig(backbone="resnet34", pretrained=True, feature_dim=128, addon_hidden=256,
                            discriminator_hidden=1024, epochs=20, batch_size=32),
            interp=TrainConfig(gamma=gamma),
        )
    raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")


def _merge_section(cls, current, updates: dict):
    if not isinstance(updates, dict):
        raise ValueError(f"section for {cls.__name__} must be a table")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(updates) - known)
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {unknown}")
    return dataclasses.replace(current, **updates)


def resolve(overrides: dict | None = None, profile: str | None = None) -> RunConfig:
    """Profile defaults overlaid with ``overrides`` (a nested dict, e.g. parsed TOML).

    Unknown sections or keys raise ``ValueError``.
    """
    overrides = dict(overrides or {})
    profile = profile or overrides.pop("profile", None) or "synthetic"
    overrides.pop("profile", None)
    cfg = profile_defaults(profile)
    unknown = sorted(set(overrides) - set(_SECTIONS))
    if unknown:
        raise ValueError(f"unknown config sections: {unknown}")
    for name, cls in _SECTIONS.items():
        if name in overrides:
            setattr(cfg, name, _merge_section(cls, getattr(cfg, name), overrides[name]))
    return cfg


def from_dict(d: dict) -> RunConfig:
    return resolve(d, d.get("profile"))


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomli.load(fh)


def loads_toml(text: str) -> RunConfig:
    return from_dict(tomli.loads(text))
