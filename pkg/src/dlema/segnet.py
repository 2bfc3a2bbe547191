"""Dual-head residual encoder-decoder for binary segmentation.

The network follows the LinkNet pattern: strided residual encoder stages,
transposed-convolution decoder stages, and additive skip connections from each
encoder level to the decoder level of the same resolution. A single decoder
trunk feeds two 1x1 heads, one for the per-pixel logit mean and one for the
per-pixel log-variance of the logit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .errors import CheckpointError, ConfigurationError, ShapeError

CHECKPOINT_VERSION = "dlema-ckpt-1"


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    base_channels: int = 16
    dropout_p: float = 0.0
    dropout_layers: int = 5
    seed: int = 0
    in_channels: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigurationError("depth must be at least 2")
        if self.base_channels < 4:
            raise ConfigurationError("base_channels must be at least 4")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must lie in [0, 1)")
        if self.dropout_layers < 0:
            raise ConfigurationError("dropout_layers must be nonnegative")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in fields})


@dataclass
class DualHeadOutput:
    """Per-pixel logit mean ``f`` and log-variance ``s = log sigma^2``.

    Holds torch tensors during training and numpy arrays when returned from
    :func:`forward`.
    """

    logit_mean: Tensor | np.ndarray
    log_variance: Tensor | np.ndarray

    @property
    def variance(self):
        if isinstance(self.log_variance, Tensor):
            return torch.exp(self.log_variance)
        return np.exp(self.log_variance)

    @property
    def probability(self):
        if isinstance(self.logit_mean, Tensor):
            return torch.sigmoid(self.logit_mean)
        return 1.0 / (1.0 + np.exp(-self.logit_mean))


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(4 if channels % 4 == 0 else 1, channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
            _norm(out_ch),
            nn.ReLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            _norm(out_ch),
        )
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _norm(out_ch)
            )
        else:
            self.shortcut = nn.Identity()
        self.act = nn.ReLU()

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.body(x) + self.shortcut(x))


class DecoderBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ConvTranspose2d(in_ch, out_ch, 2, stride=2, bias=False),
            _norm(out_ch),
            nn.ReLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            _norm(out_ch),
            nn.ReLU(),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.body(x)


def dropout_positions(depth: int, count: int) -> list[tuple[str, int]]:
    """Stages that receive a dropout layer, most central first.

    Alternates deepest encoder stage, deepest decoder stage, next encoder stage
    and so on, so a handful of layers sits around the bottleneck.
    """
    order = []
    for k in reversed(range(depth)):
        order += [("enc", k), ("dec", k)]
    return order[:count]


class SegNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        widths = [c] + [c * 2**k for k in range(config.depth)]
        self.stem = nn.Sequential(
            nn.Conv2d(config.in_channels, c, 3, padding=1, bias=False), _norm(c), nn.ReLU()
        )
        self.encoder = nn.ModuleList(
            ResidualBlock(widths[k], widths[k + 1], stride=2) for k in range(config.depth)
        )
        self.decoder = nn.ModuleList(DecoderBlock(widths[k + 1], widths[k]) for k in range(config.depth))
        drop_at = set(dropout_positions(config.depth, config.dropout_layers)) if config.dropout_p > 0 else set()
        self.enc_drop = nn.ModuleList(
            nn.Dropout(config.dropout_p) if ("enc", k) in drop_at else nn.Identity()
            for k in range(config.depth)
        )
        self.dec_drop = nn.ModuleList(
            nn.Dropout(config.dropout_p) if ("dec", k) in drop_at else nn.Identity()
            for k in range(config.depth)
        )
        self.logit_head = nn.Conv2d(c, 1, 1)
        self.logvar_head = nn.Conv2d(c, 1, 1)

    @property
    def multiple(self) -> int:
        return 2**self.config.depth

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Map ``(B, 3, H, W)`` images to ``(B, H, W)`` logit means and log-variances."""
        h, w = x.shape[-2:]
        if h % self.multiple or w % self.multiple:
            raise ShapeError(
                f"input spatial size {h}x{w} must be a multiple of {self.multiple} (2**depth)"
            )
        skips = [self.stem(x)]
        for block, drop in zip(self.encoder, self.enc_drop):
            skips.append(drop(block(skips[-1])))
        y = skips.pop()
        for k in reversed(range(self.config.depth)):
            y = self.dec_drop[k](self.decoder[k](y)) + skips[k]
        return self.logit_head(y).squeeze(1), self.logvar_head(y).squeeze(1)


def build_model(config: ModelConfig) -> SegNet:
    """Construct a network whose initial parameters depend only on ``config.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = SegNet(config)
    return model


def _as_batch(image) -> tuple[Tensor, bool]:
    x = torch.as_tensor(np.asarray(image) if not isinstance(image, Tensor) else image)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    return x.float(), single


def _to_output(f: Tensor, s: Tensor, single: bool) -> DualHeadOutput:
    f, s = f.detach().cpu().numpy(), s.detach().cpu().numpy()
    if single:
        f, s = f[0], s[0]
    return DualHeadOutput(logit_mean=f, log_variance=s)


def forward(model: SegNet, image, train_mode: bool = False) -> DualHeadOutput:
    """Run one forward pass on a ``(3, H, W)`` or ``(B, 3, H, W)`` image array.

    ``train_mode`` activates dropout; the model's previous mode is restored.
    """
    x, single = _as_batch(image)
    was_training = model.training
    model.train(train_mode)
    try:
        with torch.no_grad():
            f, s = model(x)
    finally:
        model.train(was_training)
    return _to_output(f, s, single)


def forward_mc_dropout(model: SegNet, image, num_passes: int = 15, seed: int = 0) -> list[DualHeadOutput]:
    """``num_passes`` stochastic forward passes with dropout kept active."""
    if num_passes < 1:
        raise ConfigurationError("num_passes must be positive")
    x, single = _as_batch(image)
    was_training = model.training
    outputs = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model.train(True)
        try:
            with torch.no_grad():
                for _ in range(num_passes):
                    f, s = model(x)
                    outputs.append(_to_output(f, s, single))
        finally:
            model.train(was_training)
    return outputs


def save_checkpoint(model: SegNet, path: str | Path, extra: dict | None = None) -> Path:
    """Write config and named parameter arrays into a single ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(model.config), "extra": extra or {}}
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[SegNet, dict]:
    """Rebuild a model from :func:`save_checkpoint` output; returns ``(model, extra)``."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = meta.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has version {version!r}; expected {CHECKPOINT_VERSION!r}"
        )
    model = SegNet(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})
    model.eval()
    return model, meta.get("extra", {})
