"""Run configuration: nested dataclasses with strict JSON loading.

Every field has a working default; unknown keys are rejected so typos
fail fast instead of silently running a different experiment.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import GeneratorSpec
from .errors import ConfigError
from .hierpool import SALIENCY_MODES, RefinementConfig


@dataclass
class EncoderConfig:
    dim: int = 64            # shared text/instance embedding width
    blocks: int = 12         # frozen stack depth
    mlp_hidden: int = 16
    attn_hidden: int = 32    # gated-attention hidden width
    backbone_seed: int = 2024

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")
        for name in ("blocks", "mlp_hidden", "attn_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass
class TrainConfig:
    temperature: float = 0.07
    lr: float = 3e-3         # paper-style sweeps stay within [1e-4, 1e-2]
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    depth: int = 2           # trailing blocks with trainable adapters
    ssf_init_std: float = 0.02
    shots: int = 4

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if self.shots < 1 or self.depth < 1 or self.max_epochs < 1:
            raise ConfigError("shots, depth and max_epochs must be >= 1")


@dataclass
class LocalizationConfig:
    saliency: str = "multiplicative"
    threshold: float = 0.5

    def __post_init__(self):
        if self.saliency not in SALIENCY_MODES:
            raise ConfigError(f"saliency must be one of {SALIENCY_MODES}, got {self.saliency!r}")
        if not 0 <= self.threshold <= 1:
            raise ConfigError(f"threshold must be in [0, 1], got {self.threshold}")


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    localization: LocalizationConfig = field(default_factory=LocalizationConfig)

    def __post_init__(self):
        if self.train.depth > self.encoder.blocks:
            raise ConfigError(
                f"depth {self.train.depth} exceeds encoder blocks {self.encoder.blocks}")

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "refinement": RefinementConfig,
    "generator": GeneratorSpec,
    "localization": LocalizationConfig,
}


def _build_section(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{where}' must be an object")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key '{where}.{key}'")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad value in config section '{where}': {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    for key in data:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config section '{key}'")
    parts = {name: _build_section(cls, data.get(name, {}), name)
             for name, cls in _SECTIONS.items()}
    return RunConfig(**parts)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def apply_overrides(cfg: RunConfig, *, seed: int | None = None, shots: int | None = None,
                    depth: int | None = None, factor: float | None = None,
                    threshold: float | None = None) -> RunConfig:
    """Command-line overrides for the most commonly swept knobs."""
    train = cfg.train
    if seed is not None:
        train = replace(train, seed=seed)
    if shots is not None:
        train = replace(train, shots=shots)
    if depth is not None:
        train = replace(train, depth=depth)
    refinement = cfg.refinement
    if factor is not None:
        refinement = replace(refinement, factor=factor)
    if threshold is not None:
        refinement = replace(refinement, threshold=threshold)
    return replace(cfg, train=train, refinement=refinement)
