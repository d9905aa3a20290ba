"""Pipeline configuration: a versioned JSON document with one section per module."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import JacfuseError
from .phantom import PhantomConfig
from .preprocess import PreprocessConfig
from .registration import RegistrationParams

CONFIG_VERSION = 1
DEFAULT_SEED = 7


class ConfigError(JacfuseError, ValueError):
    pass


@dataclass(frozen=True)
class JacobianConfig:
    no_change_eps: float = 1e-6


@dataclass(frozen=True)
class DatasetConfig:
    n_per_class: int = 10
    missing_fraction: float = 0.2
    test_fraction: float = 0.2
    folds: int = 5
    adasyn_k: int = 5
    adasyn_beta: float = 1.0
    template_iterations: int = 2


@dataclass(frozen=True)
class ModelsConfig:
    cnn_filters: tuple[int, int] = (8, 16)
    cnn_dims: tuple[int, int, int] = (16, 16, 16)
    dropout: float = 0.2
    learning_rate: float = 0.001
    batch_size: int = 4
    epochs: int = 100
    n_trees: int = 50
    feature_filters: int = 32


@dataclass(frozen=True)
class FusionConfig:
    modality_order: tuple[str, str] = ("MRI", "CT")

    def __post_init__(self):
        if tuple(self.modality_order) != ("MRI", "CT"):
            raise ConfigError("modality order is fixed to MRI, CT")


@dataclass(frozen=True)
class EvaluateConfig:
    figures: bool = True


SECTIONS = {
    "preprocess": PreprocessConfig,
    "registration": RegistrationParams,
    "jacobian": JacobianConfig,
    "dataset": DatasetConfig,
    "models": ModelsConfig,
    "fusion": FusionConfig,
    "evaluate": EvaluateConfig,
    "phantom": PhantomConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = DEFAULT_SEED
    out_dir: str = "out"
    verbosity: int = 1
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    jacobian: JacobianConfig = field(default_factory=JacobianConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    models: ModelsConfig = field(default_factory=ModelsConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def to_dict(self) -> dict:
        doc = {"config_version": CONFIG_VERSION, "seed": self.seed, "out_dir": self.out_dir, "verbosity": self.verbosity}
        for name in SECTIONS:
            doc[name] = {k: _jsonable(v) for k, v in dataclasses.asdict(getattr(self, name)).items()}
        return doc

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form, excluding the output directory and verbosity."""
        doc = self.to_dict()
        doc.pop("out_dir")
        doc.pop("verbosity")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def _build_section(cls, doc: dict, name: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    kwargs = {}
    defaults = cls()
    for k, v in doc.items():
        if isinstance(getattr(defaults, k), tuple) and isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {name!r} section: {e}") from e


def resolve_seed(explicit: int | None = None, from_config: int | None = None) -> int:
    """Seed priority: explicit argument, config document, ``JACFUSE_SEED``, default."""
    if explicit is not None:
        return int(explicit)
    if from_config is not None:
        return int(from_config)
    env = os.environ.get("JACFUSE_SEED")
    if env:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"JACFUSE_SEED must be an integer, got {env!r}") from e
    return DEFAULT_SEED


def config_from_dict(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    doc = dict(doc)
    version = doc.pop("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config_version {version}")
    top = {"seed", "out_dir", "verbosity"}
    unknown = sorted(set(doc) - top - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    kwargs = {name: _build_section(cls, doc[name], name) for name, cls in SECTIONS.items() if name in doc}
    kwargs["seed"] = resolve_seed(None, doc.get("seed"))
    for k in ("out_dir", "verbosity"):
        if k in doc:
            kwargs[k] = doc[k]
    return PipelineConfig(**kwargs)


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    if path is None:
        return config_from_dict({})
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except ValueError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(doc)
