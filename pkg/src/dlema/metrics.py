"""Segmentation accuracy and predictive-uncertainty metrics.

Jaccard index on thresholded predictions, pixel-averaged negative
log-likelihood and Brier score on probabilities, plus per-image evaluation
reports serializable to JSON and CSV.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ShapeError, ValidationError

GT_POLICIES = ("first", "all_mean")
METRIC_NAMES = ("jaccard", "nll", "brier")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shapes {a.shape} and {b.shape} differ")
    return a, b


def jaccard(pred_mask, gt_mask) -> float:
    """Intersection over union of two binary masks.

    Two empty masks agree perfectly and score 1.0.
    """
    a, b = _pair(pred_mask, gt_mask)
    a, b = a.astype(bool), b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def nll(pred_prob, gt_mask, eps: float = 1e-7) -> float:
    p, y = _pair(pred_prob, gt_mask)
    p = np.clip(p.astype(np.float64), eps, 1 - eps)
    y = y.astype(np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def brier(pred_prob, gt_mask) -> float:
    p, y = _pair(pred_prob, gt_mask)
    return float(np.mean(np.square(y.astype(np.float64) - p.astype(np.float64))))


def image_metrics(pred_prob, gt_mask, eps: float = 1e-7, threshold: float = 0.5) -> dict:
    pred_prob = np.asarray(pred_prob)
    return {
        "jaccard": jaccard(pred_prob > threshold, gt_mask),
        "nll": nll(pred_prob, gt_mask, eps),
        "brier": brier(pred_prob, gt_mask),
    }


@dataclass
class EvalReport:
    per_image: list[dict]
    aggregate: dict
    config_digest: str
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_image": self.per_image,
            "aggregate": self.aggregate,
            "config_digest": self.config_digest,
            "settings": self.settings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", *METRIC_NAMES])
        for row in self.per_image:
            writer.writerow([row["id"], *(repr(row[m]) for m in METRIC_NAMES)])
        writer.writerow(["mean", *(repr(self.aggregate[m]) for m in METRIC_NAMES)])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["per_image"], d["aggregate"], d["config_digest"], d.get("settings", {}))


def evaluate(
    predictions: Iterable[tuple[str, np.ndarray]],
    dataset,
    gt_policy: str = "first",
    eps: float = 1e-7,
    threshold: float = 0.5,
) -> EvalReport:
    """Score probability maps against the dataset's ground-truth masks.

    ``gt_policy="first"`` compares against each image's first mask;
    ``"all_mean"`` averages each metric over all of the image's masks.
    """
    if gt_policy not in GT_POLICIES:
        raise ValidationError(f"gt_policy must be one of {GT_POLICIES}")
    per_image = []
    for image_id, prob in predictions:
        if image_id not in dataset:
            raise KeyError(f"prediction for unknown image id {image_id!r}")
        masks = dataset[image_id].masks
        if gt_policy == "first":
            masks = masks[:1]
        scores = [image_metrics(prob, m, eps, threshold) for m in masks]
        per_image.append({"id": image_id, **{k: float(np.mean([s[k] for s in scores])) for k in METRIC_NAMES}})
    if not per_image:
        raise ValidationError("no predictions to evaluate")
    aggregate = {k: float(np.mean([row[k] for row in per_image])) for k in METRIC_NAMES}
    settings = {"gt_policy": gt_policy, "eps": eps, "threshold": threshold}
    digest = hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()[:16]
    return EvalReport(per_image, aggregate, digest, settings)


def method_table_csv(reports: Mapping[str, EvalReport]) -> str:
    """One row per method with aggregate metrics, as in a results table."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", *METRIC_NAMES])
    for name, rep in reports.items():
        writer.writerow([name, *(repr(rep.aggregate[m]) for m in METRIC_NAMES)])
    return buf.getvalue()


def write_report(report: EvalReport, out_dir: str | Path, stem: str = "report", fmt: str | None = None) -> list[Path]:
    """Write the report as JSON, CSV, or both when ``fmt`` is ``None``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in (None, "json"):
        written.append(out_dir / f"{stem}.json")
        written[-1].write_text(report.to_json())
    if fmt in (None, "csv"):
        written.append(out_dir / f"{stem}.csv")
        written[-1].write_text(report.to_csv())
    return written
