"""Declarative run configuration.

One JSON document with flat sections per subsystem (frontend, mixup, rrc,
encoder, train, augment, data). Unknown sections or keys are rejected;
omitted keys take the pinned defaults. The canonical serialized form is
hashed into a fingerprint that checkpoints carry for provenance checks.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentationConfig, GaussianConfig, MixupConfig, RrcConfig
from .dsp import FrontendConfig
from .networks import EncoderConfig


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 256
    epochs: int = 100
    seed: int = 0
    tau: float = 0.99  # target decay rate
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    segment_frames: int = 96

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.segment_frames % 8 != 0 or self.segment_frames < 8:
            raise ValueError("segment_frames must be a positive multiple of 8")


@dataclass(frozen=True)
class AugmentOptions:
    """Augmentation block toggles (ablations switch these off/on)."""

    use_pre_norm: bool = True
    use_mixup: bool = True
    use_gaussian: bool = False
    use_rrc: bool = True
    use_post_norm: bool = True
    gaussian_sigma: float = 0.4
    gaussian_alpha: float = 0.4


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None


@dataclass(frozen=True)
class RunConfig:
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    mixup: MixupConfig = field(default_factory=MixupConfig)
    rrc: RrcConfig = field(default_factory=RrcConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentOptions = field(default_factory=AugmentOptions)
    data: DataConfig = field(default_factory=DataConfig)

    def augmentation_config(self) -> AugmentationConfig:
        """Assemble the block configuration the pipeline consumes."""
        return AugmentationConfig(
            use_pre_norm=self.augment.use_pre_norm,
            use_mixup=self.augment.use_mixup,
            use_gaussian=self.augment.use_gaussian,
            use_rrc=self.augment.use_rrc,
            use_post_norm=self.augment.use_post_norm,
            mixup=self.mixup,
            rrc=self.rrc,
            gaussian=GaussianConfig(
                sigma=self.augment.gaussian_sigma, alpha=self.augment.gaussian_alpha
            ),
        )


_SECTIONS: dict[str, type] = {
    "frontend": FrontendConfig,
    "mixup": MixupConfig,
    "rrc": RrcConfig,
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "augment": AugmentOptions,
    "data": DataConfig,
}


def run_config_from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig from a parsed JSON document, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ValueError(f"config document must be an object, got {type(doc).__name__}")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ValueError(f"unknown config section(s): {', '.join(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ValueError(f"config section '{name}' must be an object")
        known = {f.name for f in dataclasses.fields(cls)}
        bad = sorted(set(section) - known)
        if bad:
            raise ValueError(f"unknown key(s) in section '{name}': {', '.join(bad)}")
        coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
        kwargs[name] = cls(**coerced)
    return RunConfig(**kwargs)


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def run_config_to_dict(cfg: RunConfig) -> dict:
    return _jsonable(dataclasses.asdict(cfg))


def config_fingerprint(cfg: RunConfig | dict) -> str:
    """SHA-256 of the canonical JSON form of a config."""
    doc = run_config_to_dict(cfg) if isinstance(cfg, RunConfig) else _jsonable(cfg)
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such config file: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON in {path}: {exc}") from exc
    return run_config_from_dict(doc)


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(run_config_to_dict(cfg), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
