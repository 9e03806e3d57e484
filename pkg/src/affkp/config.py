"""Pipeline configuration: one JSON document with a section per module.

Every section is validated against its dataclass before any work starts;
unknown sections or keys are rejected with :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .cluster import ClusterConfig
from .errors import AffkpError, ConfigError
from .losses import LossConfig
from .metrics import FMeasureConfig
from .model import ModelConfig
from .synth import SynthConfig
from .tasks import SimConfig


@dataclass
class DatasetConfig:
    n_scenes: int = 10
    first_seed: int | None = None  # scene seeds are first_seed + k; defaults to 10000 * global seed

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ConfigError(f"n_scenes must be >= 1, got {self.n_scenes}")


@dataclass
class PredictConfig:
    n_seeds: int = 2048
    min_points: int = 5  # instance size floor on the seed subsample

    def __post_init__(self):
        if self.n_seeds < 1 or self.min_points < 1:
            raise ConfigError("n_seeds and min_points must be >= 1")


@dataclass
class EvaluateConfig:
    threshold_frac: float = 0.3

    def __post_init__(self):
        if not self.threshold_frac > 0:
            raise ConfigError("threshold_frac must be positive")


@dataclass
class SimulateConfig:
    tasks: tuple = (1, 2, 3, 4)
    n_trials: int = 30
    first_seed: int = 0
    predictor: str = "oracle"  # "oracle" or "model"
    wrap_width_factor: float = 1.0  # rescales predicted w-grasp widths before simulating

    def __post_init__(self):
        self.tasks = tuple(int(t) for t in self.tasks)
        if not self.tasks or any(t not in (1, 2, 3, 4) for t in self.tasks):
            raise ConfigError(f"tasks must be a non-empty subset of 1..4, got {self.tasks}")
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1")
        if self.predictor not in ("oracle", "model"):
            raise ConfigError("predictor must be 'oracle' or 'model'")
        if not self.wrap_width_factor > 0:
            raise ConfigError("wrap_width_factor must be positive")


@dataclass
class PathsConfig:
    dataset: str | None = None
    checkpoint: str | None = None
    predictions: str | None = None


SECTIONS = {
    "synth": SynthConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "cluster": ClusterConfig,
    "fmeasure": FMeasureConfig,
    "sim": SimConfig,
    "dataset": DatasetConfig,
    "predict": PredictConfig,
    "evaluate": EvaluateConfig,
    "simulate": SimulateConfig,
    "paths": PathsConfig,
}


@dataclass
class PipelineConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=lambda: LossConfig(optimizer="adam", learning_rate=2e-3,
                                                                offset_normalization="region", ema_decay=0.998))
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    fmeasure: FMeasureConfig = field(default_factory=FMeasureConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            out[name] = _plain(dataclasses.asdict(getattr(self, name)))
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form, excluding paths."""
        d = self.to_dict()
        d.pop("paths")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def scene_seeds(self) -> list:
        first = self.dataset.first_seed if self.dataset.first_seed is not None else 10000 * self.seed
        return [first + k for k in range(self.dataset.n_scenes)]


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build_section(name: str, cls, values, base):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    merged = dataclasses.asdict(base)
    if cls is ClusterConfig and "merge_radius" not in values:
        merged["merge_radius"] = None  # re-derive from the (possibly new) bandwidth
    for key, value in values.items():
        default = merged[key]
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        if isinstance(default, bool) != isinstance(value, bool) and default is not None:
            raise ConfigError(f"{name}.{key}: expected {type(default).__name__}, got {value!r}")
        merged[key] = value
    try:
        return cls(**merged)
    except ConfigError:
        raise
    except (AffkpError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {name!r}: {exc}") from exc


def config_from_dict(d: dict) -> PipelineConfig:
    """Validate and build a :class:`PipelineConfig` from a plain mapping."""
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(d) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    cfg = PipelineConfig()
    if "seed" in d:
        if not isinstance(d["seed"], int) or isinstance(d["seed"], bool) or d["seed"] < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {d['seed']!r}")
        cfg.seed = d["seed"]
    for name, cls in SECTIONS.items():
        if name in d:
            setattr(cfg, name, _build_section(name, cls, d[name], getattr(cfg, name)))
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)
