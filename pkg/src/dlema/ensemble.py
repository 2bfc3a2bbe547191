"""Fusion of base-model probability maps.

All fusion happens in probability space as convex combinations
``fused = sum_i alpha_i * p_i``. The confidence-based strategies take
``alpha`` proportional to the reciprocal of the predicted aleatoric variance,
either per pixel or averaged into one scalar per model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ValidationError
from .segnet import SegNet, forward, forward_mc_dropout

STRATEGIES = ("uniform", "pixel_conf", "image_conf")
DEFAULT_EPS = 1e-6


@dataclass
class EnsemblePrediction:
    fused: np.ndarray
    per_model_probs: list[np.ndarray]
    per_model_uncertainty: list[np.ndarray]
    # (M,) for scalar strategies, (M, H, W) for pixel_conf
    alphas: np.ndarray
    strategy: str

    def metadata(self) -> dict:
        """``{strategy, alphas}``; per-pixel coefficients are summarised by their spatial mean."""
        if self.alphas.ndim == 1:
            return {"strategy": self.strategy, "alphas": self.alphas.tolist()}
        means = self.alphas.reshape(self.alphas.shape[0], -1).mean(axis=1)
        return {"strategy": self.strategy, "alphas": means.tolist(), "alphas_summary": "spatial_mean"}


def _stack_probs(per_model_probs) -> np.ndarray:
    if len(per_model_probs) == 0:
        raise ValidationError("fusion needs at least one model output")
    shapes = {np.shape(p) for p in per_model_probs}
    if len(shapes) != 1:
        raise ValidationError(f"model outputs have different shapes: {sorted(shapes)}")
    return np.stack([np.asarray(p, dtype=np.float64) for p in per_model_probs])


def _stack_uncertainty(per_model_uncertainty, probs: np.ndarray, eps: float, pixelwise: bool = True) -> np.ndarray:
    u = np.stack([np.asarray(v, dtype=np.float64) for v in per_model_uncertainty]) if len(per_model_uncertainty) else None
    if u is None or u.shape != probs.shape:
        raise ValidationError("need one uncertainty map per model, shaped like the probabilities")
    if np.isnan(u).any() or (u < 0).any():
        raise ValidationError("uncertainties must be nonnegative")
    if eps < 0:
        raise ValidationError("eps must be nonnegative")
    inverted = u if pixelwise else u.reshape(u.shape[0], -1).mean(axis=1)
    if eps == 0 and (inverted == 0).any():
        raise ValidationError("zero uncertainty cannot be inverted with eps=0")
    return u


def _normalize(conf: np.ndarray) -> np.ndarray:
    total = conf.sum(axis=0, keepdims=True)
    m = conf.shape[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        alphas = np.where(total > 0, conf / np.where(total > 0, total, 1.0), 1.0 / m)
    return alphas


def fuse_uniform(per_model_probs, per_model_uncertainty=()) -> EnsemblePrediction:
    probs = _stack_probs(per_model_probs)
    m = probs.shape[0]
    alphas = np.full(m, 1.0 / m)
    return EnsemblePrediction(
        fused=probs.mean(axis=0),
        per_model_probs=list(probs),
        per_model_uncertainty=[np.asarray(u) for u in per_model_uncertainty],
        alphas=alphas,
        strategy="uniform",
    )


def fuse_pixel_confidence(per_model_probs, per_model_uncertainty, eps: float = DEFAULT_EPS) -> EnsemblePrediction:
    """Per-pixel weights ``alpha_i = c_i / sum_j c_j`` with ``c_i = 1 / (u_i + eps)``."""
    probs = _stack_probs(per_model_probs)
    u = _stack_uncertainty(per_model_uncertainty, probs, eps)
    with np.errstate(divide="ignore"):
        conf = 1.0 / (u + eps)
    alphas = _normalize(conf)
    return EnsemblePrediction(
        fused=(alphas * probs).sum(axis=0),
        per_model_probs=list(probs),
        per_model_uncertainty=list(u),
        alphas=alphas,
        strategy="pixel_conf",
    )


def fuse_image_confidence(per_model_probs, per_model_uncertainty, eps: float = DEFAULT_EPS) -> EnsemblePrediction:
    """One weight per model from the reciprocal of its spatially averaged uncertainty."""
    probs = _stack_probs(per_model_probs)
    u = _stack_uncertainty(per_model_uncertainty, probs, eps, pixelwise=False)
    mean_u = u.reshape(u.shape[0], -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        conf = 1.0 / (mean_u + eps)
    alphas = _normalize(conf)
    fused = np.tensordot(alphas, probs, axes=1)
    return EnsemblePrediction(
        fused=fused,
        per_model_probs=list(probs),
        per_model_uncertainty=list(u),
        alphas=alphas,
        strategy="image_conf",
    )


def fuse(strategy: str, per_model_probs, per_model_uncertainty=(), eps: float = DEFAULT_EPS) -> EnsemblePrediction:
    if strategy == "uniform":
        return fuse_uniform(per_model_probs, per_model_uncertainty)
    if strategy == "pixel_conf":
        return fuse_pixel_confidence(per_model_probs, per_model_uncertainty, eps)
    if strategy == "image_conf":
        return fuse_image_confidence(per_model_probs, per_model_uncertainty, eps)
    raise ValidationError(f"unknown fusion strategy {strategy!r}; expected one of {STRATEGIES}")


def mc_dropout_predict(model: SegNet, image, num_passes: int = 15, seed: int = 0) -> np.ndarray:
    """Mean of ``sigmoid(logit_mean)`` over stochastic passes with dropout active."""
    passes = forward_mc_dropout(model, image, num_passes, seed)
    return np.mean([p.probability for p in passes], axis=0)


def model_outputs(model: SegNet, images, mc_passes: int = 0, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Probability and aleatoric variance maps of one model on a batch of images.

    With ``mc_passes > 0`` both maps are averaged over MC-dropout passes.
    """
    if mc_passes > 0:
        passes = forward_mc_dropout(model, images, mc_passes, seed)
        return (
            np.mean([p.probability for p in passes], axis=0),
            np.mean([p.variance for p in passes], axis=0),
        )
    out = forward(model, images, train_mode=False)
    return out.probability, out.variance


def ensemble_predict(
    models: Sequence[SegNet], image, strategy: str = "uniform", eps: float = DEFAULT_EPS, mc_passes: int = 0, seed: int = 0
) -> EnsemblePrediction:
    """Run every model on one ``(3, H, W)`` image and fuse the results."""
    outputs = [model_outputs(m, image, mc_passes, seed) for m in models]
    return fuse(strategy, [p for p, _ in outputs], [u for _, u in outputs], eps)


def write_prediction(pred: EnsemblePrediction, out_dir: str | Path, image_id: str, sidecar: bool = True) -> Path:
    """Save ``<id>.png`` (8-bit, ``round(255 p)``), optional ``<id>.npy`` float32, and ``<id>.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png = out_dir / f"{image_id}.png"
    Image.fromarray(np.rint(255 * np.clip(pred.fused, 0, 1)).astype(np.uint8), mode="L").save(png)
    if sidecar:
        np.save(out_dir / f"{image_id}.npy", pred.fused.astype(np.float32))
    (out_dir / f"{image_id}.json").write_text(json.dumps(pred.metadata(), sort_keys=True) + "\n")
    return png


def read_prediction(out_dir: str | Path, image_id: str) -> np.ndarray:
    """Probability map for ``image_id``, preferring the float sidecar over the PNG."""
    out_dir = Path(out_dir)
    npy = out_dir / f"{image_id}.npy"
    if npy.is_file():
        return np.load(npy).astype(np.float64)
    return np.asarray(Image.open(out_dir / f"{image_id}.png"), dtype=np.float64) / 255.0
