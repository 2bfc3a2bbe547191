import numpy as np
import pytest
import torch
from torch import nn

from dlema.annotation_store import MultiAnnotatedDataset, PartitionPlan, make_synthetic_lesions
from dlema.errors import ConfigurationError, ShapeError
from dlema.losses import AleatoricLossConfig
from dlema.reweighting import (
    TrainConfig,
    WeightMap,
    _lookahead_weights,
    compute_weight_maps,
    read_train_log,
    train_base_model,
    write_train_log,
)
from dlema.segnet import ModelConfig, build_model, forward


class Toy(nn.Module):
    """Two 1x1-conv layers; pixels only see their own colour."""

    def __init__(self, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.a = nn.Conv2d(3, 8, 1)
        self.b = nn.Conv2d(8, 2, 1)

    def forward(self, x):
        out = self.b(torch.tanh(self.a(x)))
        return out[:, 0], out[:, 1]


def _scene(seed=0, size=8):
    rng = np.random.default_rng(seed)
    mask = np.zeros((size, size), dtype=np.float32)
    mask[2:6, 1:7] = 1
    img = np.where(mask[None] > 0, -1.0, 1.0) + 0.1 * rng.standard_normal((3, size, size))
    return img.astype(np.float32), mask


def _maps(model, noisy, clean, lr=0.5):
    return compute_weight_maps(model, noisy, clean, lr, AleatoricLossConfig(mc_samples=4), lookahead_aleatoric=False)


def test_matching_beats_complement():
    img, mask = _scene()
    noisy = (np.stack([img, img]), np.stack([mask, 1 - mask]))
    clean = (img[None], mask[None])
    maps = _maps(Toy(), noisy, clean)
    match, comp = maps[0].values, maps[1].values
    assert match.mean() > comp.mean()
    assert comp.mean() < 0.1 * match.mean()
    assert match.std() > 0


def test_complement_of_consensus_suppressed():
    rows = [_scene(k) for k in range(4)]
    imgs = np.stack([r[0] for r in rows])
    masks = np.stack([r[1] for r in rows])
    noisy = (imgs[:2], np.stack([masks[0], 1 - masks[1]]))
    maps = _maps(Toy(seed=1), noisy, (imgs, masks))
    assert maps[1].values.mean() < 0.1 * maps[0].values.mean()


def test_nonnegative_and_normalized():
    rng = np.random.default_rng(3)
    model = build_model(ModelConfig(depth=2, base_channels=4, seed=2)).train()
    x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
    y = (rng.random((2, 16, 16)) > 0.5).astype(np.float32)
    xc = rng.standard_normal((4, 3, 16, 16)).astype(np.float32)
    yc = (rng.random((4, 16, 16)) > 0.5).astype(np.float32)
    maps = compute_weight_maps(model, (x, y), (xc, yc), 1e-2, refs=[("a", 0), ("b", 1)])
    total = sum(float(m.values.sum()) for m in maps)
    assert total == pytest.approx(1.0, abs=1e-6)
    assert all((m.values >= 0).all() and np.isfinite(m.values).all() for m in maps)
    assert [m.provenance for m in maps] == [("a", 0), ("b", 1)]


def test_uniform_fallback_when_all_clamped():
    img, mask = _scene()
    # a complement-only noisy batch gets no positive evidence anywhere
    noisy = (img[None], (1 - mask)[None])
    maps = _maps(Toy(), noisy, (img[None], mask[None]))
    np.testing.assert_allclose(maps[0].values, 1.0 / mask.size)


def test_zero_model_gradient_falls_back():
    class Const(nn.Module):
        def __init__(self):
            super().__init__()
            self.w = nn.Parameter(torch.zeros(()))

        def forward(self, x):
            z = torch.zeros(x.shape[0], *x.shape[2:]) + 0 * self.w
            return z, z

    img, mask = _scene()
    maps = _maps(Const(), (img[None], mask[None]), (img[None], mask[None]))
    np.testing.assert_allclose(maps[0].values, 1.0 / mask.size)


def test_spatial_mismatch():
    img, mask = _scene()
    with pytest.raises(ShapeError):
        _maps(Toy(), (img[None], mask[None]), (img[None, :, :4, :4], mask[None, :4, :4]))


def test_deterministic():
    img, mask = _scene()
    noisy = (np.stack([img, img]), np.stack([mask, 1 - mask]))
    a = _maps(Toy(seed=4), noisy, (img[None], mask[None]))
    b = _maps(Toy(seed=4), noisy, (img[None], mask[None]))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.values, y.values)


def test_isolation_clean_batch_steers_weights():
    img, mask = _scene()
    other = 1 - mask
    noisy = (np.stack([img, img]), np.stack([mask, other]))
    with_i = _maps(Toy(seed=5), noisy, (img[None], mask[None]))
    with_j = _maps(Toy(seed=5), noisy, (img[None], other[None]))
    assert with_i[0].values.mean() > with_i[1].values.mean()
    assert with_j[1].values.mean() > with_j[0].values.mean()


def test_lookahead_does_not_change_params():
    model = Toy(seed=6)
    before = [p.detach().clone() for p in model.parameters()]
    img, mask = _scene()
    x, y = torch.from_numpy(img[None]), torch.from_numpy(mask[None])
    _lookahead_weights(model, x, y, x, y, 0.1, AleatoricLossConfig(mc_samples=2), None, True)
    for b, p in zip(before, model.parameters()):
        assert torch.equal(b, p)
        assert p.grad is None


# --- training loop ------------------------------------------------------------


def _tiny_dataset(n=6, size=16, corrupt=(1,)):
    images, gold = make_synthetic_lesions(n, size, seed=1)
    masks, tags = [], []
    for k, g in enumerate(gold):
        masks.append([g, 1 - g if k in corrupt else g])
        tags.append(["a", "b:corrupt" if k in corrupt else "b"])
    ids = [f"t{k}" for k in range(n)]
    ds = MultiAnnotatedDataset.from_arrays(ids, images, masks, tags)
    plan = PartitionPlan(
        subsets=(tuple((i, 0) for i in ids), tuple((i, 1) for i in ids)),
        union_set=tuple((i, k) for i in ids for k in range(2)),
        seed=0,
    )
    return ds, plan


MODEL = ModelConfig(depth=2, base_channels=4, seed=3)
TRAIN = TrainConfig(lr=1e-2, momentum=0.9, batch_noisy=2, batch_clean=4, epochs=2, mc_samples=2)


def test_train_logs_and_checkpoint(tmp_path):
    ds, plan = _tiny_dataset()
    model, history = train_base_model(
        0, ds, plan, MODEL, TRAIN, val_dataset=ds, checkpoint_path=tmp_path / "c.npz", log_path=tmp_path / "l.jsonl"
    )
    assert [h["epoch"] for h in history] == [0, 1]
    for h in history:
        assert set(h) == {"epoch", "train_loss", "val_jaccard", "mean_clean_weight", "mean_noisy_weight"}
        assert np.isfinite(h["train_loss"]) and 0 <= h["val_jaccard"] <= 1
    assert read_train_log(tmp_path / "l.jsonl") == history
    assert (tmp_path / "c.npz").is_file()
    assert not model.training


def test_train_deterministic():
    ds, plan = _tiny_dataset()
    a, ha = train_base_model(0, ds, plan, MODEL, TRAIN)
    b, hb = train_base_model(0, ds, plan, MODEL, TRAIN)
    assert ha == hb
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert (pa - pb).abs().max() < 1e-6


def test_epochs_zero_returns_init():
    ds, plan = _tiny_dataset()
    model, history = train_base_model(0, ds, plan, MODEL, TrainConfig(epochs=0))
    assert history == []
    fresh = build_model(MODEL)
    x = np.stack([r.pixels for r in ds.records])
    np.testing.assert_array_equal(forward(model, x).logit_mean, forward(fresh, x).logit_mean)


def test_empty_subset_error():
    ds, plan = _tiny_dataset()
    empty = PartitionPlan((plan.subsets[0], ()), plan.union_set, 0)
    with pytest.raises(ConfigurationError, match="subset 1 is empty"):
        train_base_model(1, ds, empty, MODEL, TRAIN)
    with pytest.raises(ConfigurationError):
        train_base_model(5, ds, plan, MODEL, TRAIN)


def test_uniform_ablation_logs_unit_weights():
    ds, plan = _tiny_dataset(corrupt=range(6))
    _, history = train_base_model(0, ds, plan, MODEL, TrainConfig(epochs=1, reweight=False, batch_clean=4))
    assert history[0]["mean_clean_weight"] == pytest.approx(1.0)
    assert history[0]["mean_noisy_weight"] == pytest.approx(1.0)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_clean=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=-1)
    assert TrainConfig.from_dict({"lr": 0.1, "bogus": 1}).lr == 0.1


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_noisy, cfg.batch_clean) == (1e-4, 0.99, 5e-5, 2, 64)


def test_log_roundtrip(tmp_path):
    hist = [{"epoch": 0, "train_loss": 0.5, "val_jaccard": None, "mean_clean_weight": 1.0, "mean_noisy_weight": None}]
    write_train_log(hist, tmp_path / "x" / "log.jsonl")
    assert read_train_log(tmp_path / "x" / "log.jsonl") == hist
    assert isinstance(WeightMap(np.zeros(2)).provenance, type(None))
