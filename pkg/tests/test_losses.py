import math

import numpy as np
import pytest
import torch

from dlema.errors import ConfigurationError, ShapeError, ValidationError
from dlema.losses import (
    AleatoricLossConfig,
    aleatoric_ce_loss,
    aleatoric_pixel_loss,
    binary_cross_entropy,
    sample_logit_noise,
    weighted_ce_loss,
)
from dlema.segnet import DualHeadOutput

from oracles import aleatoric_loop


def _out(f, s):
    return DualHeadOutput(torch.as_tensor(f), torch.as_tensor(s))


def _bce(f, y):
    p = 1 / (1 + np.exp(-f))
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def test_degenerate_variance_matches_bce():
    rng = np.random.default_rng(0)
    for k in range(100):
        f = rng.normal(0, 3, (6, 6))
        y = (rng.random((6, 6)) > 0.5).astype(np.float64)
        loss = aleatoric_ce_loss(_out(f, np.full((6, 6), -40.0)), y, AleatoricLossConfig(seed=k))
        assert abs(float(loss) - _bce(f, y)) < 1e-6


def test_single_pixel_ln2():
    loss = aleatoric_ce_loss(_out(np.zeros((1, 1)), np.full((1, 1), -40.0)), np.ones((1, 1)))
    assert float(loss) == pytest.approx(math.log(2), abs=1e-9)


def test_matches_loop_oracle():
    rng = np.random.default_rng(1)
    f = rng.normal(0, 2, (8, 8))
    s = rng.normal(0, 1, (8, 8))
    y = (rng.random((8, 8)) > 0.5).astype(np.float64)
    noise = sample_logit_noise((8, 8), 10, torch.Generator().manual_seed(3), dtype=torch.float64)
    loss = aleatoric_ce_loss(_out(f, s), y, AleatoricLossConfig(mc_samples=10), noise)
    expected = aleatoric_loop(f.tolist(), s.tolist(), y.tolist(), noise.numpy().tolist())
    assert float(loss) == pytest.approx(expected, abs=1e-9)


def test_seeded_sampling_reproducible():
    rng = np.random.default_rng(2)
    f, s = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    y = np.ones((4, 4))
    cfg = AleatoricLossConfig(seed=7)
    assert float(aleatoric_ce_loss(_out(f, s), y, cfg)) == float(aleatoric_ce_loss(_out(f, s), y, cfg))


def test_finite_difference_gradients():
    rng = np.random.default_rng(3)
    cfg = AleatoricLossConfig(mc_samples=10)
    h = 1e-3
    for trial in range(5):
        f = torch.tensor(rng.normal(0, 1.5, (4, 4)), requires_grad=True)
        s = torch.tensor(rng.normal(-1, 1, (4, 4)), requires_grad=True)
        y = torch.tensor((rng.random((4, 4)) > 0.5).astype(np.float64))
        noise = sample_logit_noise((4, 4), 10, torch.Generator().manual_seed(trial), dtype=torch.float64)
        loss = aleatoric_ce_loss(DualHeadOutput(f, s), y, cfg, noise)
        gf, gs = torch.autograd.grad(loss, (f, s))
        for var, grad in ((f, gf), (s, gs)):
            fd = torch.zeros_like(var)
            with torch.no_grad():
                for idx in np.ndindex(4, 4):
                    orig = var[idx].item()
                    var[idx] = orig + h
                    up = aleatoric_ce_loss(DualHeadOutput(f, s), y, cfg, noise)
                    var[idx] = orig - h
                    down = aleatoric_ce_loss(DualHeadOutput(f, s), y, cfg, noise)
                    var[idx] = orig
                    fd[idx] = (up - down) / (2 * h)
            rel = (grad - fd).norm() / fd.norm()
            assert rel < 1e-3


def test_uncertainty_absorbs_confident_error():
    f = torch.full((1, 1), -6.0, dtype=torch.float64)
    y = torch.ones((1, 1), dtype=torch.float64)
    noise = sample_logit_noise((1, 1), 200, torch.Generator().manual_seed(0), dtype=torch.float64)
    losses = [
        float(aleatoric_pixel_loss(f, torch.full((1, 1), math.log(sig**2), dtype=torch.float64), y, noise=noise))
        for sig in (0.01, 0.5, 1.0, 2.0, 4.0)
    ]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_shape_errors():
    with pytest.raises(ShapeError):
        aleatoric_ce_loss(_out(np.zeros((2, 2)), np.zeros((2, 2))), np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        aleatoric_ce_loss(_out(np.zeros((2, 2)), np.zeros((2, 3))), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        weighted_ce_loss(np.full(3, 0.5), np.ones(3), np.ones(2))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        AleatoricLossConfig(mc_samples=0)
    with pytest.raises(ConfigurationError):
        AleatoricLossConfig(eps=0.5)


def test_weighted_two_pixel_example():
    loss = weighted_ce_loss(np.array([0.8, 0.3]), np.array([1.0, 0.0]), np.array([2.0, 1.0]))
    assert float(loss) == pytest.approx((2 * -math.log(0.8) - math.log(0.7)) / 3, abs=1e-12)
    assert float(loss) == pytest.approx(0.26765, abs=1e-5)


def test_weighted_uniform_equals_mean():
    rng = np.random.default_rng(4)
    p, y = rng.uniform(0.01, 0.99, (5, 5)), (rng.random((5, 5)) > 0.5).astype(float)
    plain = float(binary_cross_entropy(p, y).mean())
    assert float(weighted_ce_loss(p, y, np.ones((5, 5)))) == pytest.approx(plain, abs=1e-12)


def test_weighted_masking_and_homogeneity():
    p = np.array([0.9, 0.2, 0.1, 0.7])
    y = np.array([1.0, 1.0, 0.0, 0.0])
    agree = np.array([1.0, 0.0, 1.0, 0.0])
    expected = (-math.log(0.9) - math.log(0.9)) / 2
    assert float(weighted_ce_loss(p, y, agree)) == pytest.approx(expected, abs=1e-12)
    rng = np.random.default_rng(5)
    w = rng.uniform(0, 2, 4)
    base = float(weighted_ce_loss(p, y, w))
    for c in (1e-3, 0.5, 7.0, 1e4):
        assert abs(float(weighted_ce_loss(p, y, c * w)) - base) < 1e-9


def test_weighted_rejects_negative_and_zero_falls_back():
    with pytest.raises(ValidationError):
        weighted_ce_loss(np.full(2, 0.5), np.ones(2), np.array([1.0, -1.0]))
    p, y = np.array([0.8, 0.3]), np.array([1.0, 0.0])
    assert float(weighted_ce_loss(p, y, np.zeros(2))) == pytest.approx(float(binary_cross_entropy(p, y).mean()))
