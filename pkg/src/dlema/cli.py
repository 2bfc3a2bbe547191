"""Command-line pipeline: ``dlema synth|partition|train|predict|evaluate|benchmark``.

Each command reads an optional JSON experiment config and applies flag
overrides on top. Exit codes: 0 on success, 2 on validation errors (bad
config, shapes, missing predictions), 3 on runtime errors (I/O, checkpoints).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .annotation_store import (
    NormalizationStats,
    PartitionPlan,
    load_manifest,
    make_synthetic_lesions,
    partition_non_contradictory,
    split_train_val,
    synthesize_annotations,
    write_manifest,
)
from .config import ExperimentConfig, load_config, save_config
from .ensemble import STRATEGIES, fuse, model_outputs, read_prediction, write_prediction
from .errors import DlemaError, LoadError, ValidationError
from .metrics import EvalReport, evaluate, method_table_csv, write_report

log = logging.getLogger("dlema")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
PARTITION_FILE = "partition.json"


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    if getattr(args, "strategy", None) is not None:
        cfg = replace(cfg, fusion=replace(cfg.fusion, strategy=args.strategy))
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out=args.out)
    manifest = getattr(args, "manifest", None)
    if manifest is not None:
        cfg = replace(cfg, dataset=replace(cfg.dataset, manifest=manifest))
    crop = getattr(args, "crop_size", None)
    if crop is not None:
        cfg = replace(cfg, dataset=replace(cfg.dataset, crop_size=crop))
    return cfg


def _require_manifest(cfg: ExperimentConfig) -> Path:
    if not cfg.dataset.manifest:
        raise ValidationError("no dataset manifest; pass --manifest or set dataset.manifest")
    return Path(cfg.dataset.manifest)


def _writable(out: Path) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise LoadError(f"cannot create output directory {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(cfg: ExperimentConfig) -> Path:
    """Write a synthetic multi-annotator dataset plus a gold-mask manifest."""
    out = _writable(Path(cfg.out))
    spec = cfg.synthetic
    images, gold = make_synthetic_lesions(spec.n_images, spec.size, cfg.seed_for("synth"))
    annotated = synthesize_annotations(gold, spec.annotator_configs(cfg.seed), spec.coverage)
    ids = [f"synth_{k:04d}" for k in range(spec.n_images)]
    try:
        manifest = write_manifest(out, ids, images, [m for m, _ in annotated], [t for _, t in annotated])
        gold_dir = out / "gold"
        write_manifest(gold_dir, ids, images, [[g] for g in gold], None)
    except OSError as exc:
        raise LoadError(f"cannot write dataset to {out}: {exc}") from exc
    log.info("wrote %d records to %s", len(ids), manifest)
    return manifest


# ---------------------------------------------------------------------------
# partition / train
# ---------------------------------------------------------------------------


def _load_train_data(cfg: ExperimentConfig):
    dataset = load_manifest(_require_manifest(cfg), crop_size=cfg.dataset.crop_size)
    if cfg.dataset.val_fraction > 0:
        return split_train_val(dataset, cfg.dataset.val_fraction, cfg.seed_for("split"))
    return dataset, None


def cmd_partition(cfg: ExperimentConfig) -> Path:
    dataset, _ = _load_train_data(cfg)
    plan = partition_non_contradictory(dataset, cfg.seed_for("partition"))
    out = _writable(Path(cfg.out)) / PARTITION_FILE
    out.write_text(json.dumps(plan.to_dict(), indent=1) + "\n")
    log.info("partitioned %d annotations into %d subsets: %s", len(plan.union_set), len(plan), out)
    return out


def _train_one(cfg: ExperimentConfig, i: int, plan_dict: dict) -> str:
    from .reweighting import train_base_model

    dataset, val = _load_train_data(cfg)
    plan = PartitionPlan.from_dict(plan_dict)
    out = Path(cfg.out)
    try:
        train_base_model(
            i,
            dataset,
            plan,
            cfg.model_config(i),
            cfg.train_config(),
            val_dataset=val,
            checkpoint_path=out / f"base_{i}.npz",
            log_path=out / f"base_{i}.jsonl",
        )
    except DlemaError as exc:
        raise type(exc)(f"base model {i}: {exc}") from exc
    return str(out / f"base_{i}.npz")


def cmd_train(cfg: ExperimentConfig, subset: int | None = None, workers: int = 1) -> list[Path]:
    """Train one base model per non-empty subset; the partition is persisted next to the checkpoints."""
    out = _writable(Path(cfg.out))
    plan_path = out / PARTITION_FILE
    dataset, _ = _load_train_data(cfg)
    plan = partition_non_contradictory(dataset, cfg.seed_for("partition"))
    plan_path.write_text(json.dumps(plan.to_dict(), indent=1) + "\n")
    save_config(cfg, out / "config.json")

    if subset is not None:
        if not 0 <= subset < len(plan):
            raise ValidationError(f"--subset {subset} out of range; the plan has {len(plan)} subsets")
        todo = [subset]
    else:
        todo = [i for i, s in enumerate(plan.subsets) if s]
    plan_dict = plan.to_dict()
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            paths = list(pool.map(_train_one, [cfg] * len(todo), todo, [plan_dict] * len(todo)))
    else:
        paths = [_train_one(cfg, i, plan_dict) for i in todo]
    for p in paths:
        log.info("checkpoint %s", p)
    return [Path(p) for p in paths]


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def _checkpoint_paths(items: list[str]) -> list[Path]:
    paths: list[Path] = []
    for item in items:
        p = Path(item)
        paths.extend(sorted(p.glob("*.npz")) if p.is_dir() else [p])
    if not paths:
        raise ValidationError("predict needs at least one checkpoint")
    return paths


def cmd_predict(cfg: ExperimentConfig, checkpoints: list[str], mc_passes: int | None = None) -> Path:
    """Fuse every checkpoint's output for each manifest image and write maps plus metadata."""
    from .segnet import load_checkpoint

    loaded = [load_checkpoint(p) for p in _checkpoint_paths(checkpoints)]
    models = [m for m, _ in loaded]
    stats_dict = loaded[0][1].get("normalization_stats")
    stats = NormalizationStats.from_dict(stats_dict) if stats_dict else None
    dataset = load_manifest(_require_manifest(cfg), crop_size=cfg.dataset.crop_size, normalization_stats=stats)
    passes = cfg.fusion.mc_passes if mc_passes is None else mc_passes

    images = np.stack([r.pixels for r in dataset.records])
    outputs = [model_outputs(m, images, passes, cfg.seed_for("mc-dropout", i)) for i, m in enumerate(models)]
    out = _writable(Path(cfg.out))
    for n, rid in enumerate(dataset.ids):
        pred = fuse(cfg.fusion.strategy, [p[n] for p, _ in outputs], [u[n] for _, u in outputs], cfg.fusion.eps)
        write_prediction(pred, out, rid)
    log.info("wrote %d %s predictions to %s", len(dataset), cfg.fusion.strategy, out)
    return out


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _read_predictions(pred_dir: Path, ids: list[str], workers: int) -> list[tuple[str, np.ndarray]]:
    if not pred_dir.is_dir() or not any(pred_dir.glob("*.png")) and not any(pred_dir.glob("*.npy")):
        raise ValidationError(f"no predictions found in {pred_dir}")
    missing = [i for i in ids if not (pred_dir / f"{i}.npy").is_file() and not (pred_dir / f"{i}.png").is_file()]
    if missing:
        raise ValidationError(f"{pred_dir}: missing predictions for {len(missing)} ids, e.g. {missing[:3]}")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            maps = list(pool.map(lambda i: read_prediction(pred_dir, i), ids))
    else:
        maps = [read_prediction(pred_dir, i) for i in ids]
    return list(zip(ids, maps))


def _plots(reports: dict[str, EvalReport], out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    hist = out / "jaccard_hist.png"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, rep in reports.items():
        ax.hist([r["jaccard"] for r in rep.per_image], bins=20, range=(0, 1), alpha=0.6, label=name)
    ax.set_xlabel("per-image Jaccard")
    ax.set_ylabel("images")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(hist, dpi=100)
    plt.close(fig)

    bars = out / "nll_brier.png"
    names = list(reports)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 3.5))
    ax.bar(x - 0.2, [reports[n].aggregate["nll"] for n in names], 0.4, label="NLL")
    ax.bar(x + 0.2, [reports[n].aggregate["brier"] for n in names], 0.4, label="Brier")
    ax.set_xticks(x, names, rotation=20, fontsize=8)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(bars, dpi=100)
    plt.close(fig)
    return [hist, bars]


def cmd_evaluate(
    cfg: ExperimentConfig,
    predictions: list[str],
    fmt: str | None = None,
    ids: list[str] | None = None,
    workers: int = 1,
    plots: bool = True,
) -> dict[str, EvalReport]:
    """Score one or more prediction directories; each directory is one method."""
    dataset = load_manifest(_require_manifest(cfg), crop_size=cfg.dataset.crop_size)
    wanted = list(ids) if ids else dataset.ids
    out = _writable(Path(cfg.out))
    reports = {}
    for pred_dir in map(Path, predictions):
        pairs = _read_predictions(pred_dir, wanted, workers)
        report = evaluate(pairs, dataset, cfg.metrics.gt_policy, cfg.metrics.eps, cfg.metrics.threshold)
        name = pred_dir.name or str(pred_dir)
        stem = "report" if len(predictions) == 1 else f"report_{name}"
        write_report(report, out, stem, fmt)
        reports[name] = report
    if len(reports) > 1:
        (out / "methods.csv").write_text(method_table_csv(reports))
    if plots:
        _plots(reports, out)
    return reports


def cmd_benchmark(cfg: ExperimentConfig) -> dict:
    from .benchmark import BenchmarkConfig, run_benchmark

    bench = BenchmarkConfig(seed=cfg.seed)
    if cfg.train.epochs != ExperimentConfig().train.epochs:
        bench = replace(bench, train=replace(bench.train, epochs=cfg.train.epochs))
    result = run_benchmark(bench)
    out = _writable(Path(cfg.out))
    summary = result.summary()
    (out / "benchmark.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    reports = {f"base_{i}": r for i, r in enumerate(result.base)}
    reports.update({f"mc_{i}": r for i, r in enumerate(result.base_mc)})
    reports.update(result.fused)
    (out / "methods.csv").write_text(method_table_csv(reports))
    return summary


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlema", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dlema {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="global seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        if manifest:
            p.add_argument("--manifest", help="dataset manifest (overrides config)")
            p.add_argument("--crop-size", type=int, help="square side images are resized to")

    common(sub.add_parser("synth", help="write a synthetic multi-annotator dataset"), manifest=False)
    common(sub.add_parser("partition", help="split annotations into non-contradictory subsets"))

    p = sub.add_parser("train", help="train base models, one per subset")
    common(p)
    p.add_argument("--subset", type=int, help="train only this base model")
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int, default=1, help="processes, one base model each")

    p = sub.add_parser("predict", help="fuse base-model predictions")
    common(p)
    p.add_argument("--checkpoints", nargs="+", required=True, help="checkpoint files or directories")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--mc-passes", type=int, help="MC-dropout passes per model (0 = deterministic)")

    p = sub.add_parser("evaluate", help="score predictions and draw plots")
    common(p)
    p.add_argument("--predictions", nargs="+", required=True, help="prediction directories, one per method")
    p.add_argument("--format", choices=("json", "csv"), help="report format (default: both)")
    p.add_argument("--gt-policy", choices=("first", "all_mean"))
    p.add_argument("--ids", nargs="+", help="image ids to score (default: all in the manifest)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("benchmark", help="run the in-memory synthetic benchmark")
    common(p, manifest=False)
    p.add_argument("--epochs", type=int)
    return parser


def run(args: argparse.Namespace) -> None:
    cfg = _config(args)
    if args.command == "synth":
        print(cmd_synth(cfg))
    elif args.command == "partition":
        print(cmd_partition(cfg))
    elif args.command == "train":
        for p in cmd_train(cfg, args.subset, args.workers):
            print(p)
    elif args.command == "predict":
        print(cmd_predict(cfg, args.checkpoints, args.mc_passes))
    elif args.command == "evaluate":
        if args.gt_policy:
            cfg = replace(cfg, metrics=replace(cfg.metrics, gt_policy=args.gt_policy))
        reports = cmd_evaluate(cfg, args.predictions, args.format, args.ids, args.workers, not args.no_plots)
        print(json.dumps({k: r.aggregate for k, r in reports.items()}, indent=2, sort_keys=True))
    elif args.command == "benchmark":
        print(json.dumps(cmd_benchmark(cfg), indent=2, sort_keys=True))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run(args)
    except (ValidationError, KeyError) as exc:
        print(f"dlema: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DlemaError, OSError) as exc:
        print(f"dlema: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
