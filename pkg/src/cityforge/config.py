"""Pipeline configuration: one JSON document, validated with field paths."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class GridConfig:
    resolution: int = 32
    padding: float = 0.05


@dataclass
class LatentConfig:
    resolution: int = 8
    channels: int = 8
    seed: int = 0


@dataclass
class ModelConfig:
    d_model: int = 32
    heads: int = 2
    blocks: int = 1
    d_cond: int = 16
    seed: int = 0


@dataclass
class PriorConfig:
    lod: int = 1
    lam: float = 0.5


@dataclass
class TrainingConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    lambdas: list = field(default_factory=lambda: [0.3, 0.5, 0.7])
    lods: list = field(default_factory=lambda: [0, 1])


@dataclass
class SamplingConfig:
    steps: int = 16
    solver: str = "euler"
    seed: int = 0


@dataclass
class MetricsConfig:
    points: int = 20000
    tau: typing.Optional[float] = None
    seed: int = 0
    mask_resolution: int = 64
    generated_mesh: typing.Optional[str] = None
    reference_mesh: typing.Optional[str] = None


@dataclass
class ClusterConfig:
    min_cluster_size: int = 2
    min_samples: int = 2
    method: str = "eom"
    allow_single_cluster: bool = False
    height_scale: float = 1.0
    standardize: bool = False


@dataclass
class PromptConfig:
    library: typing.Optional[str] = None  # bundled default when unset


@dataclass
class PipelineConfig:
    output_dir: str = "out"
    region: typing.Optional[str] = None
    region_name: str = "region"
    embeddings: typing.Optional[str] = None
    reference_embeddings: typing.Optional[str] = None
    checkpoint: typing.Optional[str] = None
    grid: GridConfig = field(default_factory=GridConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def path(self, value: str | None) -> Path | None:
        """Resolve a configured path relative to the config file's directory."""
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else getattr(self, "_base", Path(".")) / p

    @property
    def out(self) -> Path:
        return self.path(self.output_dir)


def _coerce(value: Any, tp, path: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if tp is list:
        if not isinstance(value, list) or not value:
            raise ConfigError(path, "expected a non-empty list")
        return list(value)
    return value


def _build(cls, doc: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in names:
            raise ConfigError(f"{prefix}.{key}" if prefix else key, "unknown field")
    kwargs = {}
    for name in names:
        if name in doc:
            path = f"{prefix}.{name}" if prefix else name
            kwargs[name] = _coerce(doc[name], hints[name], path)
    return cls(**kwargs)


def _check(cfg: PipelineConfig) -> None:
    def positive(path, v):
        if v <= 0:
            raise ConfigError(path, f"must be positive, got {v}")

    positive("grid.resolution", cfg.grid.resolution)
    positive("latent.resolution", cfg.latent.resolution)
    positive("latent.channels", cfg.latent.channels)
    if cfg.grid.resolution % cfg.latent.resolution:
        raise ConfigError("latent.resolution", f"must divide grid.resolution ({cfg.grid.resolution})")
    if not 0.0 <= cfg.grid.padding < 1.0:
        raise ConfigError("grid.padding", "must lie in [0, 1)")
    if cfg.prior.lod not in (0, 1):
        raise ConfigError("prior.lod", "must be 0 or 1")
    if not 0.0 <= cfg.prior.lam <= 1.0:
        raise ConfigError("prior.lam", "must lie in [0, 1]")
    for i, lam in enumerate(cfg.training.lambdas):
        if not isinstance(lam, (int, float)) or not 0.0 <= lam <= 1.0:
            raise ConfigError(f"training.lambdas[{i}]", "must be a number in [0, 1]")
    for i, lod in enumerate(cfg.training.lods):
        if lod not in (0, 1):
            raise ConfigError(f"training.lods[{i}]", "must be 0 or 1")
    positive("model.d_model", cfg.model.d_model)
    positive("model.heads", cfg.model.heads)
    if cfg.model.d_model % cfg.model.heads:
        raise ConfigError("model.heads", "must divide model.d_model")
    if cfg.training.steps < 0:
        raise ConfigError("training.steps", "must be non-negative")
    positive("training.batch_size", cfg.training.batch_size)
    positive("training.lr", cfg.training.lr)
    positive("sampling.steps", cfg.sampling.steps)
    if cfg.sampling.solver not in ("euler", "heun"):
        raise ConfigError("sampling.solver", "must be 'euler' or 'heun'")
    positive("metrics.points", cfg.metrics.points)
    positive("metrics.mask_resolution", cfg.metrics.mask_resolution)
    if cfg.metrics.tau is not None:
        positive("metrics.tau", cfg.metrics.tau)
    if cfg.cluster.method not in ("eom", "leaf"):
        raise ConfigError("cluster.method", "must be 'eom' or 'leaf'")
    if cfg.cluster.min_cluster_size < 2:
        raise ConfigError("cluster.min_cluster_size", "must be at least 2")
    positive("cluster.min_samples", cfg.cluster.min_samples)
    for name in ("region", "embeddings", "reference_embeddings", "checkpoint"):
        p = cfg.path(getattr(cfg, name))
        if p is not None and not p.is_file():
            raise ConfigError(name, f"file not found: {p}")
    for name in ("generated_mesh", "reference_mesh"):
        p = cfg.path(getattr(cfg.metrics, name))
        if p is not None and not p.is_file():
            raise ConfigError(f"metrics.{name}", f"file not found: {p}")
    p = cfg.path(cfg.prompts.library)
    if p is not None and not p.is_file():
        raise ConfigError("prompts.library", f"file not found: {p}")


def apply_override(doc: dict, assignment: str) -> None:
    """Apply ``a.b.c=value``; the value is parsed as JSON, else kept as text."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = doc
    for i, part in enumerate(parts[:-1]):
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise ConfigError(".".join(parts[: i + 1]), "is not an object")
        node = nxt
    node[parts[-1]] = value


def load_config(doc: dict, base: Path | str = ".", overrides=()) -> PipelineConfig:
    doc = json.loads(json.dumps(doc))  # private copy
    for item in overrides:
        apply_override(doc, item)
    cfg = _build(PipelineConfig, doc, "")
    cfg._base = Path(base)
    _check(cfg)
    return cfg


def load_config_file(path: str | Path, overrides=()) -> PipelineConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except FileNotFoundError:
        raise ConfigError("<config>", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<config>", f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("<config>", "top level must be an object")
    return load_config(doc, path.parent, overrides)
