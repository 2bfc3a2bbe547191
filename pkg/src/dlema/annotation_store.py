"""Multi-annotated segmentation datasets.

Holds the dataset model (images paired with one or more binary masks), manifest
ingestion, per-channel normalization, the random non-contradictory partitioning
of annotations into subsets, image-level train/validation splits, and a
synthetic multi-annotator generator for desk-scale experiments.

Pixel arrays are stored channel-first, ``(3, H, W)`` float32, already
normalized. Masks are ``(H, W)`` uint8 with values in {0, 1}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import draw, measure, morphology

from .errors import LoadError, ValidationError

AnnotationRef = tuple[str, int]

#: Tag suffix marking an annotation that was grossly corrupted on purpose.
CORRUPT_SUFFIX = ":corrupt"

MASK_THRESHOLD = 127
STYLES = ("dilate", "erode", "polygon_simplify", "boundary_jitter")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel mean and standard deviation, in units of ``uint8 / 255``."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def apply(self, image: np.ndarray) -> np.ndarray:
        """Normalize a ``(H, W, 3)`` uint8 image into a ``(3, H, W)`` float32 array."""
        x = _to_unit_float(image)
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        return np.ascontiguousarray(((x - mean) / std).transpose(2, 0, 1), dtype=np.float32)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(mean=tuple(float(v) for v in d["mean"]), std=tuple(float(v) for v in d["std"]))

    @classmethod
    def compute(cls, images: Iterable[np.ndarray]) -> "NormalizationStats":
        """Pool statistics over every pixel of every image (not per image)."""
        total = np.zeros(3)
        total_sq = np.zeros(3)
        count = 0
        for image in images:
            x = _to_unit_float(image).reshape(-1, 3)
            total += x.sum(axis=0)
            total_sq += np.square(x).sum(axis=0)
            count += x.shape[0]
        if count == 0:
            raise ValidationError("cannot compute normalization statistics of an empty set")
        mean = total / count
        var = np.maximum(total_sq / count - np.square(mean), 0.0)
        std = np.sqrt(var)
        std[std < 1e-8] = 1.0
        return cls(mean=tuple(mean.tolist()), std=tuple(std.tolist()))


@dataclass(frozen=True)
class ImageRecord:
    id: str
    pixels: np.ndarray
    masks: tuple[np.ndarray, ...]
    annotator_tags: tuple[str, ...] | None = None

    def __post_init__(self):
        if not self.masks:
            raise ValidationError(f"record {self.id!r} has no masks")
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValidationError(
                f"record {self.id!r}: pixels must be (3, H, W), got {self.pixels.shape}"
            )
        hw = self.pixels.shape[1:]
        for k, m in enumerate(self.masks):
            if m.shape != hw:
                raise ValidationError(
                    f"record {self.id!r}: mask {k} has shape {m.shape}, image is {hw}"
                )
            if not np.isin(m, (0, 1)).all():
                raise ValidationError(f"record {self.id!r}: mask {k} is not binary")
        if self.annotator_tags is not None and len(self.annotator_tags) != len(self.masks):
            raise ValidationError(
                f"record {self.id!r}: {len(self.annotator_tags)} tags for {len(self.masks)} masks"
            )

    @property
    def num_masks(self) -> int:
        return len(self.masks)

    def is_corrupt(self, k: int) -> bool:
        return self.annotator_tags is not None and self.annotator_tags[k].endswith(CORRUPT_SUFFIX)


@dataclass(frozen=True)
class MultiAnnotatedDataset:
    records: tuple[ImageRecord, ...]
    normalization_stats: NormalizationStats
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for pos, rec in enumerate(self.records):
            if rec.id in index:
                raise ValidationError(f"duplicate record id {rec.id!r}")
            index[rec.id] = pos
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, image_id: str) -> ImageRecord:
        try:
            return self.records[self._index[image_id]]
        except KeyError:
            raise KeyError(f"unknown image id {image_id!r}") from None

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    @property
    def m_max(self) -> int:
        return max((r.num_masks for r in self.records), default=0)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def num_annotations(self) -> int:
        return sum(r.num_masks for r in self.records)

    def subset(self, ids: Sequence[str]) -> "MultiAnnotatedDataset":
        """Records for ``ids`` (in that order), keeping the parent's normalization."""
        return MultiAnnotatedDataset(tuple(self[i] for i in ids), self.normalization_stats)

    def annotation(self, ref: AnnotationRef) -> np.ndarray:
        image_id, k = ref
        return self[image_id].masks[k]

    @classmethod
    def from_arrays(
        cls,
        ids: Sequence[str],
        images: Sequence[np.ndarray],
        masks: Sequence[Sequence[np.ndarray]],
        tags: Sequence[Sequence[str] | None] | None = None,
        normalization_stats: NormalizationStats | None = None,
    ) -> "MultiAnnotatedDataset":
        """Build a dataset from raw ``(H, W, 3)`` uint8 images and binary masks.

        Statistics are pooled over ``images`` unless ``normalization_stats`` is given
        (e.g. to apply training statistics to a test set).
        """
        if not (len(ids) == len(images) == len(masks)):
            raise ValidationError("ids, images and masks must have equal length")
        stats = normalization_stats or NormalizationStats.compute(images)
        tags = tags if tags is not None else [None] * len(ids)
        records = []
        for image_id, image, image_masks, image_tags in zip(ids, images, masks, tags):
            records.append(
                ImageRecord(
                    id=str(image_id),
                    pixels=stats.apply(image),
                    masks=tuple(np.asarray(m, dtype=np.uint8) for m in image_masks),
                    annotator_tags=tuple(image_tags) if image_tags is not None else None,
                )
            )
        return cls(tuple(records), stats)


@dataclass(frozen=True)
class PartitionPlan:
    """Assignment of every annotation to exactly one non-contradictory subset."""

    subsets: tuple[tuple[AnnotationRef, ...], ...]
    union_set: tuple[AnnotationRef, ...]
    seed: int

    def __len__(self) -> int:
        return len(self.subsets)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "subsets": [[list(r) for r in s] for s in self.subsets],
            "union_set": [list(r) for r in self.union_set],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionPlan":
        def refs(items):
            return tuple((str(i), int(k)) for i, k in items)

        return cls(
            subsets=tuple(refs(s) for s in d["subsets"]),
            union_set=refs(d["union_set"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class SyntheticAnnotatorConfig:
    style: str = "dilate"
    magnitude: int = 0
    flip_fraction: float = 0.0
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        if self.style not in STYLES:
            raise ValidationError(f"unknown annotator style {self.style!r}; expected one of {STYLES}")
        if self.magnitude < 0:
            raise ValidationError("annotator magnitude must be nonnegative")
        if not 0.0 <= self.flip_fraction <= 1.0:
            raise ValidationError("flip_fraction must lie in [0, 1]")

    @property
    def tag(self) -> str:
        return self.name or f"{self.style}-{self.magnitude}"

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticAnnotatorConfig":
        return cls(
            style=d.get("style", "dilate"),
            magnitude=int(d.get("magnitude", 0)),
            flip_fraction=float(d.get("flip_fraction", 0.0)),
            seed=int(d.get("seed", 0)),
            name=d.get("name"),
        )


# ---------------------------------------------------------------------------
# Manifest ingestion
# ---------------------------------------------------------------------------


def _to_unit_float(image: np.ndarray) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if np.issubdtype(np.asarray(image).dtype, np.integer):
        x = x / 255.0
    return x


def _square_crop_resize(img: Image.Image, size: int, resample) -> Image.Image:
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != size:
        img = img.resize((size, size), resample=resample)
    return img


def _open(path: Path) -> Image.Image:
    if not path.is_file():
        raise LoadError(f"missing file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    return img


def binarize_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground is any 8-bit value above 127."""
    return (np.asarray(mask) > MASK_THRESHOLD).astype(np.uint8)


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"missing file: {path}")
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(entries, list):
        raise ValidationError(f"manifest {path} must be a JSON list of records")
    for e in entries:
        if not isinstance(e, dict) or "id" not in e or "image" not in e:
            raise ValidationError(f"manifest {path}: malformed record {e!r}")
        if not e.get("masks"):
            raise ValidationError(f"record {e['id']!r} has no masks")
    return entries


def load_manifest(
    path: str | Path,
    crop_size: int = 96,
    normalization_stats: NormalizationStats | None = None,
) -> MultiAnnotatedDataset:
    """Load a manifest, square-crop and resize to ``crop_size``, binarize and normalize.

    Images are center-cropped to a square, then resized (bilinear for images,
    bilinear-then-threshold for masks) if the square side differs from
    ``crop_size``. Normalization statistics are pooled over the whole manifest
    unless ``normalization_stats`` is supplied.
    """
    if crop_size <= 0:
        raise ValidationError("crop_size must be positive")
    path = Path(path)
    root = path.parent
    entries = read_manifest(path)

    ids, images, masks, tags = [], [], [], []
    for e in entries:
        rid = str(e["id"])
        img = _open(root / e["image"]).convert("RGB")
        rec_masks = []
        for mpath in e["masks"]:
            m = _open(root / mpath).convert("L")
            if m.size != img.size:
                raise ValidationError(
                    f"record {rid!r}: mask {mpath} is {m.size[0]}x{m.size[1]}, "
                    f"image is {img.size[0]}x{img.size[1]}"
                )
            m = _square_crop_resize(m, crop_size, Image.BILINEAR)
            rec_masks.append(binarize_mask(np.asarray(m)))
        img = _square_crop_resize(img, crop_size, Image.BILINEAR)
        annotators = e.get("annotators")
        if annotators is not None and len(annotators) != len(rec_masks):
            raise ValidationError(f"record {rid!r}: annotators list does not match masks")
        ids.append(rid)
        images.append(np.asarray(img, dtype=np.uint8))
        masks.append(rec_masks)
        tags.append(annotators)
    if not ids:
        raise ValidationError(f"manifest {path} has no records")
    return MultiAnnotatedDataset.from_arrays(ids, images, masks, tags, normalization_stats)


def write_manifest(
    out_dir: str | Path,
    ids: Sequence[str],
    images: Sequence[np.ndarray],
    masks: Sequence[Sequence[np.ndarray]],
    tags: Sequence[Sequence[str] | None] | None = None,
    name: str = "manifest.json",
) -> Path:
    """Write images/masks as PNG files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for n, (rid, image, rec_masks) in enumerate(zip(ids, images, masks)):
        img_rel = f"images/{rid}.png"
        Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(out_dir / img_rel)
        mask_rels = []
        for k, m in enumerate(rec_masks):
            rel = f"masks/{rid}_{k}.png"
            Image.fromarray((np.asarray(m) > 0).astype(np.uint8) * 255, mode="L").save(out_dir / rel)
            mask_rels.append(rel)
        entry = {"id": rid, "image": img_rel, "masks": mask_rels}
        if tags is not None and tags[n] is not None:
            entry["annotators"] = list(tags[n])
        entries.append(entry)
    manifest = out_dir / name
    manifest.write_text(json.dumps(entries, indent=1) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# Partitioning and splitting
# ---------------------------------------------------------------------------


def partition_non_contradictory(dataset: MultiAnnotatedDataset, seed: int) -> PartitionPlan:
    """Randomly spread each image's annotations over distinct subsets.

    There are ``m_max`` subsets. An image with ``M_n`` masks has them assigned,
    without replacement, to ``M_n`` distinct subsets drawn uniformly at random,
    so no subset ever holds two annotations of the same image. Images with fewer
    masks simply appear in fewer subsets.
    """
    if len(dataset) == 0:
        raise ValidationError("cannot partition an empty dataset")
    m_max = dataset.m_max
    rng = np.random.default_rng(seed)
    subsets: list[list[AnnotationRef]] = [[] for _ in range(m_max)]
    union: list[AnnotationRef] = []
    for rec in dataset.records:
        slots = rng.choice(m_max, size=rec.num_masks, replace=False)
        for k, slot in enumerate(slots):
            ref = (rec.id, k)
            subsets[int(slot)].append(ref)
            union.append(ref)
    return PartitionPlan(tuple(tuple(s) for s in subsets), tuple(union), int(seed))


def split_train_val(
    dataset: MultiAnnotatedDataset, val_fraction: float, seed: int
) -> tuple[MultiAnnotatedDataset, MultiAnnotatedDataset]:
    """Split by image id; every annotation of an image lands on the same side."""
    if not 0.0 < val_fraction < 1.0:
        raise ValidationError("val_fraction must lie strictly between 0 and 1")
    n = len(dataset)
    n_val = int(round(val_fraction * n))
    if n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    val_pos = set(order[:n_val].tolist())
    ids = dataset.ids
    train_ids = [ids[p] for p in range(n) if p not in val_pos]
    val_ids = [ids[p] for p in range(n) if p in val_pos]
    return dataset.subset(train_ids), dataset.subset(val_ids)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def _simplify_polygon(mask: np.ndarray, tolerance: int) -> np.ndarray:
    padded = np.pad(mask, 1)
    out = np.zeros_like(padded)
    for contour in measure.find_contours(padded.astype(float), 0.5):
        poly = measure.approximate_polygon(contour, tolerance=float(tolerance))
        if len(poly) < 3:
            continue
        rr, cc = draw.polygon(poly[:, 0], poly[:, 1], shape=padded.shape)
        out[rr, cc] = 1
    return out[1:-1, 1:-1]


def _jitter_boundary(mask: np.ndarray, magnitude: int, rng: np.random.Generator) -> np.ndarray:
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(1 - mask)
    signed = inside - outside
    noise = ndimage.gaussian_filter(rng.standard_normal(mask.shape), sigma=max(mask.shape) / 16)
    noise /= noise.std() + 1e-12
    return (signed + magnitude * noise > 0).astype(np.uint8)


def perturb_mask(mask: np.ndarray, style: str, magnitude: int, rng: np.random.Generator) -> np.ndarray:
    """Apply one annotator's systematic bias to a binary mask."""
    mask = np.asarray(mask, dtype=np.uint8)
    if magnitude == 0:
        return mask.copy()
    if style == "dilate":
        return ndimage.binary_dilation(mask, structure=morphology.disk(magnitude)).astype(np.uint8)
    if style == "erode":
        return ndimage.binary_erosion(mask, structure=morphology.disk(magnitude)).astype(np.uint8)
    if style == "polygon_simplify":
        return _simplify_polygon(mask, magnitude)
    if style == "boundary_jitter":
        return _jitter_boundary(mask, magnitude, rng)
    raise ValidationError(f"unknown annotator style {style!r}")


def synthesize_annotations(
    gold_masks: Sequence[np.ndarray],
    configs: Sequence[SyntheticAnnotatorConfig],
    coverage: float = 1.0,
) -> list[tuple[list[np.ndarray], list[str]]]:
    """Simulate several annotators labelling overlapping random subsets of images.

    Each annotator labels a random ``coverage`` fraction of the images and
    replaces its mask by the complement of the gold mask on a random
    ``flip_fraction`` of the images it labels. Returns, per image, the list of
    produced masks and a parallel list of annotator tags (corrupted masks have
    tags ending in ``CORRUPT_SUFFIX``). If some image would end up with no
    annotation, the first annotator is extended to cover every image.
    """
    if len(gold_masks) == 0:
        raise ValidationError("gold_masks is empty")
    if not configs:
        raise ValidationError("at least one annotator config is required")
    if not 0.0 < coverage <= 1.0:
        raise ValidationError("coverage must lie in (0, 1]")
    n = len(gold_masks)
    n_cover = max(1, int(round(coverage * n)))

    covered = []
    for cfg in configs:
        rng = np.random.default_rng([cfg.seed, 0])
        covered.append(set(rng.choice(n, size=n_cover, replace=False).tolist()))
    if set().union(*covered) != set(range(n)):
        covered[0] = set(range(n))

    out: list[tuple[list[np.ndarray], list[str]]] = [([], []) for _ in range(n)]
    for cfg, cover in zip(configs, covered):
        rng = np.random.default_rng([cfg.seed, 1])
        order = sorted(cover)
        n_flip = int(round(cfg.flip_fraction * len(order)))
        flipped = set(rng.permutation(order)[:n_flip].tolist())
        for idx in order:
            gold = np.asarray(gold_masks[idx], dtype=np.uint8)
            if idx in flipped:
                mask, tag = 1 - gold, cfg.tag + CORRUPT_SUFFIX
            else:
                mask, tag = perturb_mask(gold, cfg.style, cfg.magnitude, rng), cfg.tag
            out[idx][0].append(mask)
            out[idx][1].append(tag)
    return out


def make_synthetic_lesions(
    n: int, size: int = 64, seed: int = 0
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Generate ``n`` dermoscopy-like RGB images with irregular dark lesions.

    Returns ``(images, gold_masks)``: uint8 ``(size, size, 3)`` images and
    uint8 ``(size, size)`` masks.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images, masks = [], []
    for _ in range(n):
        cy, cx = size / 2 + rng.uniform(-0.15, 0.15, size=2) * size
        ry, rx = rng.uniform(0.14, 0.32, size=2) * size
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
        angle = np.arctan2(v, u)
        wobble = 1.0
        for k in (2, 3, 5):
            wobble = wobble + rng.uniform(0.0, 0.12) * np.cos(k * angle + rng.uniform(0, 2 * np.pi))
        mask = (np.hypot(u, v) < wobble).astype(np.uint8)
        if mask.sum() == 0:
            mask[int(cy), int(cx)] = 1

        skin = rng.uniform([170, 120, 100], [235, 185, 160])
        lesion = skin * rng.uniform(0.35, 0.8) + rng.uniform(-15, 15, size=3)
        soft = ndimage.gaussian_filter(mask.astype(np.float64), sigma=rng.uniform(0.8, 2.5))
        texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=2.0) * 12
        light = 1.0 + rng.uniform(-0.15, 0.15) * (xx - size / 2) / size
        img = skin[None, None, :] * (1 - soft[..., None]) + lesion[None, None, :] * soft[..., None]
        img = img * light[..., None] + texture[..., None] * soft[..., None]
        img = img + rng.normal(0, rng.uniform(4, 14), size=img.shape)
        images.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
        masks.append(mask)
    return images, masks
