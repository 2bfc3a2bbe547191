"""Spatially adaptive annotation reweighting and the base-model training loop.

Every training step weighs each pixel of each noisy annotation by how much a
small gradient step on that pixel would lower the cross-entropy on a batch
drawn from the model's clean subset. The weights come from a one-step
lookahead: perturb the loss by per-pixel weights initialised at zero, take a
virtual SGD step, and differentiate the clean loss at the virtual parameters
with respect to those weights. Negative evidence is clamped to zero and the
batch weights are normalised to sum to one.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.func import functional_call

from .annotation_store import AnnotationRef, MultiAnnotatedDataset, PartitionPlan
from .errors import ConfigurationError, ShapeError
from .losses import AleatoricLossConfig, aleatoric_pixel_loss, binary_cross_entropy, sample_logit_noise
from .seeding import derive_seed
from .segnet import ModelConfig, SegNet, build_model, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WeightMap:
    values: np.ndarray
    provenance: AnnotationRef | None = None


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.99
    weight_decay: float = 5e-5
    batch_noisy: int = 2
    batch_clean: int = 64
    epochs: int = 1
    seed: int = 0
    mc_samples: int = 10
    # whether the log-variance head takes part in the virtual lookahead step
    lookahead_aleatoric: bool = True
    # False trains on uniform weights (no reweighting), for ablations
    reweight: bool = True
    # seed the clean batch with C^i's annotations of the noisy-batch images
    pair_clean: bool = True
    # "constant" or "cosine" (decays to zero over the run, stepped per batch)
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("lr must be positive; momentum and weight_decay nonnegative")
        if self.batch_noisy < 1 or self.batch_clean < 1:
            raise ConfigurationError("batch sizes must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be nonnegative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError("lr_schedule must be 'constant' or 'cosine'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        fields = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in fields})


def _lookahead_weights(
    model: SegNet,
    noisy_images: torch.Tensor,
    noisy_masks: torch.Tensor,
    clean_images: torch.Tensor,
    clean_masks: torch.Tensor,
    lr: float,
    loss_config: AleatoricLossConfig,
    noise: torch.Tensor | None,
    lookahead_aleatoric: bool,
) -> torch.Tensor:
    if noisy_images.shape[-2:] != clean_images.shape[-2:]:
        raise ShapeError(
            f"noisy batch is {tuple(noisy_images.shape[-2:])}, clean batch is {tuple(clean_images.shape[-2:])}"
        )
    # second-order conv backward on CPU corrupts memory for strided inputs
    noisy_images, clean_images = noisy_images.contiguous(), clean_images.contiguous()
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    eps_w = torch.zeros(noisy_masks.shape, dtype=noisy_images.dtype, requires_grad=True)

    f, s = functional_call(model, (params, buffers), (noisy_images,))
    if lookahead_aleatoric:
        pixel = aleatoric_pixel_loss(f, s, noisy_masks, loss_config, noise)
    else:
        pixel = binary_cross_entropy(torch.sigmoid(f), noisy_masks, loss_config.eps)
    grads = torch.autograd.grad((eps_w * pixel).sum(), list(params.values()), create_graph=True, allow_unused=True)
    virtual = {
        name: p if g is None else p - lr * g for (name, p), g in zip(params.items(), grads)
    }

    f_clean, _ = functional_call(model, (virtual, buffers), (clean_images,))
    clean_loss = F.binary_cross_entropy_with_logits(f_clean, clean_masks.to(f_clean.dtype))
    (grad_w,) = torch.autograd.grad(clean_loss, eps_w)

    raw = torch.clamp(-grad_w.detach(), min=0.0)
    total = raw.sum()
    if float(total) > 0.0:
        return raw / total
    return torch.full_like(raw, 1.0 / raw.numel())


def compute_weight_maps(
    model: SegNet,
    noisy_batch,
    clean_batch,
    lr: float,
    loss_config: AleatoricLossConfig = AleatoricLossConfig(),
    noise: torch.Tensor | None = None,
    refs: Sequence[AnnotationRef] | None = None,
    lookahead_aleatoric: bool = True,
) -> list[WeightMap]:
    """Per-pixel weights for each noisy annotation, normalised over the batch.

    ``noisy_batch`` and ``clean_batch`` are ``(images, masks)`` pairs with
    images ``(B, 3, H, W)`` and masks ``(B, H, W)``; the clean batch must come
    from the model's own non-contradictory subset. The model should be in train
    mode. Returned values are nonnegative and sum to one across the batch; when
    every raw weight is clamped to zero the maps are uniform.
    """
    weights = _lookahead_weights(
        model,
        torch.as_tensor(noisy_batch[0]).float(),
        torch.as_tensor(noisy_batch[1]).float(),
        torch.as_tensor(clean_batch[0]).float(),
        torch.as_tensor(clean_batch[1]).float(),
        lr,
        loss_config,
        noise,
        lookahead_aleatoric,
    )
    refs = list(refs) if refs is not None else [None] * weights.shape[0]
    return [WeightMap(values=w.numpy(), provenance=r) for w, r in zip(weights, refs)]


def _dataset_tensors(dataset: MultiAnnotatedDataset):
    images = torch.from_numpy(np.stack([r.pixels for r in dataset.records])).float()
    masks = [[torch.from_numpy(m.astype(np.float32)) for m in r.masks] for r in dataset.records]
    return images, masks


def _clean_batch(clean_refs, by_image, noisy_ids, size, rng, pair):
    """Draw ``size`` distinct references from the clean subset.

    With ``pair`` the subset's annotations of the noisy-batch images go in
    first, so each noisy annotation meets its image's reference annotation.
    """
    first = [by_image[i] for i in noisy_ids if i in by_image] if pair else []
    first = list(dict.fromkeys(first))[:size]
    rest = np.setdiff1d(np.arange(len(clean_refs)), first)
    extra = rng.choice(rest, size=size - len(first), replace=False) if size > len(first) else []
    return [clean_refs[int(c)] for c in [*first, *extra]]


def _val_jaccard(model: SegNet, dataset: MultiAnnotatedDataset) -> float:
    from .metrics import evaluate
    from .segnet import forward

    images = np.stack([r.pixels for r in dataset.records])
    out = forward(model, images, train_mode=False)
    preds = [(r.id, p) for r, p in zip(dataset.records, out.probability)]
    return float(evaluate(preds, dataset, gt_policy="all_mean").aggregate["jaccard"])


def train_base_model(
    i: int,
    dataset: MultiAnnotatedDataset,
    plan: PartitionPlan,
    model_config: ModelConfig,
    train_config: TrainConfig,
    val_dataset: MultiAnnotatedDataset | None = None,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
    loss_config: AleatoricLossConfig | None = None,
) -> tuple[SegNet, list[dict]]:
    """Train base model ``i`` on the union set, steered by clean subset ``plan.subsets[i]``.

    Each step draws ``batch_noisy`` images with one uniformly chosen annotation
    each, and ``batch_clean`` annotations from the clean subset, computes the
    lookahead weight maps, then takes an SGD step on the weighted aleatoric
    cross-entropy. Returns the model and one log entry per epoch with keys
    ``epoch, train_loss, val_jaccard, mean_clean_weight, mean_noisy_weight``.

    Logged weights are relative to uniform (1.0 means an annotation received the
    weight it would have under uniform weighting). "noisy" means annotations
    whose tag marks them as corrupted; it is ``None`` if there are none.
    """
    if not 0 <= i < len(plan.subsets):
        raise ConfigurationError(f"plan has {len(plan.subsets)} subsets; no subset {i}")
    clean_refs = [r for r in plan.subsets[i] if r[0] in dataset]
    if not clean_refs:
        raise ConfigurationError(f"subset {i} is empty; base model {i} cannot be trained")
    loss_config = loss_config or AleatoricLossConfig(
        mc_samples=train_config.mc_samples, seed=derive_seed(train_config.seed, "mc", i)
    )

    model = build_model(model_config)
    history: list[dict] = []
    images, masks = _dataset_tensors(dataset)
    pos = {rid: n for n, rid in enumerate(dataset.ids)}
    by_image = {rid: n for n, (rid, _) in enumerate(clean_refs)}
    n_images = len(dataset)
    bn = min(train_config.batch_noisy, n_images)
    bc = min(train_config.batch_clean, len(clean_refs))

    rng = np.random.default_rng(derive_seed(train_config.seed, "batches", i))
    noise_gen = torch.Generator().manual_seed(derive_seed(train_config.seed, "noise", i))
    opt = torch.optim.SGD(
        model.parameters(),
        lr=train_config.lr,
        momentum=train_config.momentum,
        weight_decay=train_config.weight_decay,
    )
    total_steps = train_config.epochs * -(-n_images // bn)
    sched = None
    if train_config.lr_schedule == "cosine" and total_steps > 0:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(train_config.seed, "dropout", i))
        for epoch in range(train_config.epochs):
            model.train()
            losses, clean_w, noisy_w = [], [], []
            order = rng.permutation(n_images)
            for start in range(0, n_images, bn):
                idx = order[start:start + bn]
                picks = [int(rng.integers(len(masks[j]))) for j in idx]
                x = images[idx]
                y = torch.stack([masks[j][k] for j, k in zip(idx, picks)])

                refs_c = _clean_batch(clean_refs, by_image, [dataset.ids[j] for j in idx], bc, rng, train_config.pair_clean)
                xc = images[[pos[r[0]] for r in refs_c]]
                yc = torch.stack([masks[pos[r[0]]][r[1]] for r in refs_c])

                noise = sample_logit_noise(y.shape, loss_config.mc_samples, noise_gen)
                if train_config.reweight:
                    # the virtual step keeps the base lr; normalisation makes its scale moot
                    weights = _lookahead_weights(
                        model, x, y, xc, yc, train_config.lr, loss_config, noise,
                        train_config.lookahead_aleatoric,
                    )
                else:
                    weights = torch.full(y.shape, 1.0 / y.numel())

                f, s = model(x)
                loss = (weights * aleatoric_pixel_loss(f, s, y, loss_config, noise)).sum()
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                if sched is not None:
                    sched.step()

                losses.append(loss.item())
                relative = (weights * weights.numel()).mean(dim=(1, 2))
                for j, k, w in zip(idx, picks, relative.tolist()):
                    (noisy_w if dataset.records[j].is_corrupt(k) else clean_w).append(w)

            entry = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_jaccard": _val_jaccard(model, val_dataset) if val_dataset is not None and len(val_dataset) else None,
                "mean_clean_weight": float(np.mean(clean_w)) if clean_w else None,
                "mean_noisy_weight": float(np.mean(noisy_w)) if noisy_w else None,
            }
            log.info("base model %d epoch %d: %s", i, epoch, entry)
            history.append(entry)

    model.eval()
    if checkpoint_path is not None:
        save_checkpoint(
            model,
            checkpoint_path,
            extra={
                "subset": i,
                "normalization_stats": dataset.normalization_stats.to_dict(),
                "train_config": asdict(train_config),
            },
        )
    if log_path is not None:
        write_train_log(history, log_path)
    return model, history


def write_train_log(history: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in history))
    return path


def read_train_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
