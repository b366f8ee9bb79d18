"""Pipeline configuration: strict JSON loading, hashing and seed splitting."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .data import SyntheticSpec
from .encoder import MetricConfig
from .explain import CompressionConfig
from .tracker import KalmanConfig

# stage ids for seed splitting: stage seed = SeedSequence([root, id]).generate_state(1)[0]
STAGES = {"generate": 0, "encoder": 1, "bnn": 2, "evaluate": 3, "explain": 4, "compress": 5}


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    path: str | None = None
    format: str = "bin"
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class EncoderConfig:
    epochs: int = 20
    latent_dim: int = 16
    hidden: list = field(default_factory=lambda: [128, 64])
    lr: float = 3e-4


@dataclass
class BnnConfig:
    hidden: list = field(default_factory=lambda: [32, 32, 16])
    epochs: int = 100
    lr: float = 1e-2
    batch_size: int = 64
    prior_sigma: float = 1.0
    rho_init: float = -5.0
    T: int = 100


@dataclass
class ExplainConfig:
    n_explain: int = 48
    n_coalitions: int = 1024
    T: int = 50


@dataclass
class PipelineConfig:
    seed: int = 0
    out_dir: str = "bayeshar-run"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tracker: KalmanConfig = field(default_factory=KalmanConfig)
    bnn: BnnConfig = field(default_factory=BnnConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    compression: CompressionConfig = field(default_factory=CompressionConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """SHA-256 of the canonical JSON config (every field, out_dir included)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def stage_seed(self, stage: str) -> int:
        ss = np.random.SeedSequence([self.seed, STAGES[stage]])
        return int(ss.generate_state(1)[0])


_NESTED = {
    (PipelineConfig, "dataset"): DatasetConfig,
    (PipelineConfig, "metric"): MetricConfig,
    (PipelineConfig, "encoder"): EncoderConfig,
    (PipelineConfig, "tracker"): KalmanConfig,
    (PipelineConfig, "bnn"): BnnConfig,
    (PipelineConfig, "explain"): ExplainConfig,
    (PipelineConfig, "compression"): CompressionConfig,
}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{where}.{key}")
        elif cls is DatasetConfig and key == "spec":
            try:
                kwargs[key] = SyntheticSpec.from_dict(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{where}.spec: {exc}") from exc
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "config")


def load_config(path=None) -> PipelineConfig:
    """Load a JSON config; ``None`` loads the bundled small config."""
    try:
        if path is None:
            text = resources.files("bayeshar").joinpath("configs/small.json").read_text()
        else:
            text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON config: {exc}") from exc
    return config_from_dict(data)
