"""Desk-scale synthetic benchmark.

Runs the whole pipeline in memory: synthesize lesion images and biased
annotators, partition the annotations, train one base model per subset, fuse
their outputs and score everything on a held-out test set scored against
gold masks. Also hosts the corrupted-annotation reweighting experiment.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .annotation_store import (
    MultiAnnotatedDataset,
    NormalizationStats,
    SyntheticAnnotatorConfig,
    make_synthetic_lesions,
    partition_non_contradictory,
    synthesize_annotations,
)
from .ensemble import STRATEGIES, fuse, model_outputs
from .metrics import EvalReport, evaluate
from .reweighting import TrainConfig, train_base_model
from .seeding import derive_seed
from .segnet import ModelConfig, SegNet

log = logging.getLogger(__name__)


def benchmark_model() -> ModelConfig:
    return ModelConfig(depth=3, base_channels=8, dropout_p=0.0, dropout_layers=5)


def benchmark_train() -> TrainConfig:
    return TrainConfig(lr=1e-2, momentum=0.9, batch_noisy=2, batch_clean=16, epochs=8, lr_schedule="cosine")


@dataclass
class BenchmarkConfig:
    n_train: int = 200
    n_test: int = 50
    size: int = 64
    coverage: float = 0.8
    annotators: tuple[SyntheticAnnotatorConfig, ...] = (
        SyntheticAnnotatorConfig("dilate", 2, 0.1, name="dilate-2"),
        SyntheticAnnotatorConfig("erode", 2, 0.1, name="erode-2"),
        SyntheticAnnotatorConfig("boundary_jitter", 3, 0.1, name="jitter-3"),
    )
    model: ModelConfig = field(default_factory=benchmark_model)
    train: TrainConfig = field(default_factory=benchmark_train)
    # MC-dropout variants: same training, dropout at this rate; 0 skips them
    mc_dropout_p: float = 0.3
    mc_passes: int = 15
    seed: int = 0


@dataclass
class BenchmarkResult:
    base: list[EvalReport]
    base_mc: list[EvalReport]
    fused: dict[str, EvalReport]
    histories: list[list[dict]]
    seconds: float

    def summary(self) -> dict:
        def agg(r: EvalReport) -> dict:
            return dict(r.aggregate)

        return {
            "base": [agg(r) for r in self.base],
            "base_mc": [agg(r) for r in self.base_mc],
            "fused": {k: agg(r) for k, r in self.fused.items()},
            "seconds": self.seconds,
        }


def synthetic_splits(config: BenchmarkConfig) -> tuple[MultiAnnotatedDataset, MultiAnnotatedDataset]:
    """Train set annotated by the simulated annotators; test set carries gold masks only."""
    n = config.n_train + config.n_test
    images, gold = make_synthetic_lesions(n, config.size, derive_seed(config.seed, "lesions"))
    annotators = [replace(a, seed=derive_seed(config.seed, "annotator", k)) for k, a in enumerate(config.annotators)]
    annotated = synthesize_annotations(gold[: config.n_train], annotators, config.coverage)

    train_ids = [f"train_{k:04d}" for k in range(config.n_train)]
    stats = NormalizationStats.compute(images[: config.n_train])
    train = MultiAnnotatedDataset.from_arrays(
        train_ids,
        images[: config.n_train],
        [m for m, _ in annotated],
        [t for _, t in annotated],
        stats,
    )
    test_ids = [f"test_{k:04d}" for k in range(config.n_test)]
    test = MultiAnnotatedDataset.from_arrays(
        test_ids, images[config.n_train:], [[g] for g in gold[config.n_train:]], None, stats
    )
    return train, test


def _score(dataset: MultiAnnotatedDataset, probs: np.ndarray) -> EvalReport:
    return evaluate(zip(dataset.ids, probs), dataset, gt_policy="first")


def run_benchmark(config: BenchmarkConfig = BenchmarkConfig()) -> BenchmarkResult:
    """Train the ensemble and score base models, their MC-dropout variants and every fusion strategy.

    Ensemble members are aleatoric base models without dropout. Each has an
    MC-dropout twin trained on the same subset with the same seeds, scored by
    averaging ``mc_passes`` stochastic passes.
    """
    start = time.perf_counter()
    train, test = synthetic_splits(config)
    plan = partition_non_contradictory(train, derive_seed(config.seed, "partition"))
    train_cfg = replace(config.train, seed=derive_seed(config.seed, "train"))
    test_images = np.stack([r.pixels for r in test.records])

    models: list[SegNet] = []
    histories = []
    base_mc = []
    for i in range(len(plan)):
        model_cfg = replace(config.model, seed=derive_seed(config.seed, "init", i))
        model, history = train_base_model(i, train, plan, model_cfg, train_cfg)
        models.append(model)
        histories.append(history)
        log.info("base model %d trained: %s", i, history[-1] if history else None)
        if config.mc_dropout_p > 0 and config.mc_passes > 0:
            mc_model, _ = train_base_model(i, train, plan, replace(model_cfg, dropout_p=config.mc_dropout_p), train_cfg)
            p, _ = model_outputs(mc_model, test_images, config.mc_passes, derive_seed(config.seed, "mc-dropout", i))
            base_mc.append(_score(test, p))

    outputs = [model_outputs(m, test_images) for m in models]
    base = [_score(test, p) for p, _ in outputs]
    fused = _fuse_all(test, outputs)
    return BenchmarkResult(base, base_mc, fused, histories, time.perf_counter() - start)


def _fuse_all(test: MultiAnnotatedDataset, outputs) -> dict[str, EvalReport]:
    fused = {}
    for strategy in STRATEGIES:
        maps = [
            fuse(strategy, [p[n] for p, _ in outputs], [u[n] for _, u in outputs]).fused
            for n in range(len(test))
        ]
        fused[strategy] = _score(test, np.stack(maps))
    return fused


@dataclass
class ReweightingResult:
    history: list[dict]
    corrupt_fraction: float

    @property
    def final_ratio(self) -> float:
        last = self.history[-1]
        return last["mean_noisy_weight"] / last["mean_clean_weight"]


def run_reweighting_experiment(
    n_images: int = 200,
    size: int = 64,
    flip_fraction: float = 0.3,
    model: ModelConfig | None = None,
    train: TrainConfig | None = None,
    subset: int = 0,
    seed: int = 0,
) -> ReweightingResult:
    """Train one base model where a ``flip_fraction`` of annotations are gold complements.

    The annotators otherwise agree with gold up to small systematic biases. The
    returned history logs the mean relative weight of corrupted vs clean
    annotations per epoch.
    """
    images, gold = make_synthetic_lesions(n_images, size, derive_seed(seed, "lesions"))
    annotators = [
        SyntheticAnnotatorConfig("dilate", 1, flip_fraction, derive_seed(seed, "annotator", 0)),
        SyntheticAnnotatorConfig("erode", 1, flip_fraction, derive_seed(seed, "annotator", 1)),
        SyntheticAnnotatorConfig("boundary_jitter", 2, flip_fraction, derive_seed(seed, "annotator", 2)),
    ]
    annotated = synthesize_annotations(gold, annotators, coverage=1.0)
    ids = [f"img_{k:04d}" for k in range(n_images)]
    dataset = MultiAnnotatedDataset.from_arrays(ids, images, [m for m, _ in annotated], [t for _, t in annotated])
    plan = partition_non_contradictory(dataset, derive_seed(seed, "partition"))
    model = replace(model or benchmark_model(), seed=derive_seed(seed, "init", subset))
    train = replace(train or benchmark_train(), seed=derive_seed(seed, "train"))
    _, history = train_base_model(subset, dataset, plan, model, train)
    n_corrupt = sum(rec.is_corrupt(k) for rec in dataset.records for k in range(rec.num_masks))
    return ReweightingResult(history, n_corrupt / dataset.num_annotations)
