"""Experiment configuration documents.

An experiment is described by one JSON document with ``synthetic``, ``dataset``,
``model``, ``train``, ``fusion``, ``metrics``, ``out`` and ``seed`` sections.
Every stochastic component gets its seed from the global seed through
:func:`~dlema.seeding.derive_seed`, so one integer reproduces a whole run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .annotation_store import SyntheticAnnotatorConfig
from .ensemble import DEFAULT_EPS, STRATEGIES
from .errors import ConfigurationError
from .metrics import GT_POLICIES
from .reweighting import TrainConfig
from .seeding import derive_seed
from .segnet import ModelConfig


def default_annotators() -> list[dict]:
    # three systematic styles; flip_fraction adds gross errors on top
    return [
        {"style": "dilate", "magnitude": 2, "flip_fraction": 0.1, "name": "dilate-2"},
        {"style": "erode", "magnitude": 2, "flip_fraction": 0.1, "name": "erode-2"},
        {"style": "boundary_jitter", "magnitude": 3, "flip_fraction": 0.1, "name": "jitter-3"},
    ]


@dataclass
class SyntheticSpec:
    n_images: int = 200
    size: int = 64
    coverage: float = 0.8
    annotators: list[dict] = field(default_factory=default_annotators)

    def annotator_configs(self, seed: int) -> list[SyntheticAnnotatorConfig]:
        return [
            SyntheticAnnotatorConfig.from_dict({**a, "seed": derive_seed(seed, "annotator", k)})
            for k, a in enumerate(self.annotators)
        ]


@dataclass
class DatasetSpec:
    manifest: str | None = None
    crop_size: int = 64
    val_fraction: float = 0.0


@dataclass
class FusionSpec:
    strategy: str = "uniform"
    eps: float = DEFAULT_EPS
    mc_passes: int = 0


@dataclass
class MetricSpec:
    gt_policy: str = "first"
    eps: float = 1e-7
    threshold: float = 0.5


@dataclass
class ExperimentConfig:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionSpec = field(default_factory=FusionSpec)
    metrics: MetricSpec = field(default_factory=MetricSpec)
    out: str = "runs/experiment"
    seed: int = 0

    def __post_init__(self):
        if self.fusion.strategy not in STRATEGIES:
            raise ConfigurationError(f"fusion.strategy must be one of {STRATEGIES}")
        if self.metrics.gt_policy not in GT_POLICIES:
            raise ConfigurationError(f"metrics.gt_policy must be one of {GT_POLICIES}")
        if self.synthetic.n_images < 1 or self.synthetic.size < 1:
            raise ConfigurationError("synthetic.n_images and synthetic.size must be positive")
        if not 0.0 <= self.dataset.val_fraction < 1.0:
            raise ConfigurationError("dataset.val_fraction must lie in [0, 1)")
        if self.fusion.mc_passes < 0:
            raise ConfigurationError("fusion.mc_passes must be nonnegative")

    def seed_for(self, *tags) -> int:
        return derive_seed(self.seed, *tags)

    def model_config(self, i: int) -> ModelConfig:
        return replace(self.model, seed=self.seed_for("init", i))

    def train_config(self, epochs: int | None = None) -> TrainConfig:
        cfg = replace(self.train, seed=self.seed_for("train"))
        return cfg if epochs is None else replace(cfg, epochs=epochs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(
                synthetic=SyntheticSpec(**d.get("synthetic", {})),
                dataset=DatasetSpec(**d.get("dataset", {})),
                model=ModelConfig.from_dict(d.get("model", {})),
                train=TrainConfig.from_dict(d.get("train", {})),
                fusion=FusionSpec(**d.get("fusion", {})),
                metrics=MetricSpec(**d.get("metrics", {})),
                out=str(d.get("out", "runs/experiment")),
                seed=int(d.get("seed", 0)),
            )
        except TypeError as exc:
            raise ConfigurationError(f"bad config field: {exc}") from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a JSON config; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must be a JSON object")
    return ExperimentConfig.from_dict(data)


def save_config(config: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
