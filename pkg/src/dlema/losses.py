"""Training objectives.

``aleatoric_ce_loss`` treats each pixel's logit as Gaussian, ``N(f, exp(s))``,
and scores the Monte Carlo estimate of the marginal label likelihood.
``weighted_ce_loss`` is the per-pixel weighted binary cross-entropy on
probabilities, normalized by the total weight.

All functions accept torch tensors or numpy arrays; numpy inputs are converted
without changing dtype, so float64 inputs produce float64 results.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import ConfigurationError, ShapeError, ValidationError
from .segnet import DualHeadOutput


@dataclass(frozen=True)
class AleatoricLossConfig:
    mc_samples: int = 10
    eps: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ConfigurationError("mc_samples must be at least 1")
        if not 0.0 < self.eps < 0.5:
            raise ConfigurationError("eps must lie in (0, 0.5)")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else torch.as_tensor(x)


def _check_shapes(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def sample_logit_noise(shape, mc_samples: int, generator: torch.Generator | None = None, dtype=torch.float32) -> Tensor:
    """Standard normal draws of shape ``(mc_samples, *shape)``."""
    return torch.randn((mc_samples, *shape), generator=generator, dtype=dtype)


def aleatoric_pixel_loss(
    logit_mean, log_variance, mask, config: AleatoricLossConfig = AleatoricLossConfig(), noise: Tensor | None = None
) -> Tensor:
    """Per-pixel ``-log((1/T) sum_t p_t)`` with ``p_t = sigmoid(f + exp(s/2) eps_t)``.

    ``p_t`` is the probability assigned to the observed label. When ``noise`` is
    omitted it is drawn from a generator seeded with ``config.seed``.
    """
    f, s, y = _t(logit_mean), _t(log_variance), _t(mask)
    _check_shapes(f, s, "logit mean vs log-variance")
    _check_shapes(f, y, "output vs mask")
    if noise is None:
        gen = torch.Generator().manual_seed(config.seed)
        noise = sample_logit_noise(f.shape, config.mc_samples, gen, dtype=f.dtype)
    elif tuple(noise.shape[1:]) != tuple(f.shape):
        raise ShapeError(f"noise shape {tuple(noise.shape)} does not match output {tuple(f.shape)}")
    sigma = torch.exp(0.5 * s)
    p = torch.sigmoid(f.unsqueeze(0) + sigma.unsqueeze(0) * noise.to(f.dtype))
    y = y.to(f.dtype).unsqueeze(0)
    p_obs = (y * p + (1 - y) * (1 - p)).clamp(config.eps, 1 - config.eps)
    return -torch.log(p_obs.mean(dim=0))


def aleatoric_ce_loss(
    output: DualHeadOutput, mask, config: AleatoricLossConfig = AleatoricLossConfig(), noise: Tensor | None = None
) -> Tensor:
    """Mean over pixels of :func:`aleatoric_pixel_loss`."""
    return aleatoric_pixel_loss(output.logit_mean, output.log_variance, mask, config, noise).mean()


def binary_cross_entropy(prediction, mask, eps: float = 1e-7) -> Tensor:
    """Per-pixel binary cross-entropy of probabilities clamped to ``[eps, 1 - eps]``."""
    p, y = _t(prediction), _t(mask)
    _check_shapes(p, y, "prediction vs mask")
    p = p.clamp(eps, 1 - eps)
    y = y.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p))


def weighted_pixel_mean(pixel_losses: Tensor, weights) -> Tensor:
    """``sum(W * loss) / sum(W)``; falls back to the plain mean when ``sum(W) == 0``."""
    w = _t(weights).to(pixel_losses.dtype)
    _check_shapes(pixel_losses, w, "losses vs weights")
    if bool((w < 0).any()):
        raise ValidationError("weights must be nonnegative")
    total = w.sum()
    if float(total) == 0.0:
        return pixel_losses.mean()
    return (w * pixel_losses).sum() / total


def weighted_ce_loss(prediction, mask, weights, eps: float = 1e-7) -> Tensor:
    """Weighted binary cross-entropy; zero-weight pixels drop out of the objective."""
    return weighted_pixel_mean(binary_cross_entropy(prediction, mask, eps), weights)
