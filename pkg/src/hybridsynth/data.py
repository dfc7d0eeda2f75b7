"""Synthetic shapes dataset with exact segmentation maps.

Images contain a handful of colored shapes (rectangle, disk, triangle) on
a dark background; each shape class has a fixed palette color, perturbed
by per-shape jitter and per-pixel noise. Because labels are derived from
the same masks that paint the shapes, the segmentation maps are
pixel-exact, which later enables an oracle segmenter for mIoU.

Everything here is a pure function of (seed, config): same inputs, same
bytes out. The on-disk layout is `NNNN_img.png` / `NNNN_lab.png` pairs
plus a `dataset.json` manifest; external datasets in the same layout can
be ingested, with nearest-neighbor rescaling for label maps.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import pngio
from .config import DataConfig, ShapesConfig
from .errors import ConfigurationError, DataError

SHAPE_TYPES = ("rectangle", "disk", "triangle")

# split ids folded into per-sample seeds so train/val never share a sample
_SPLIT_IDS = {"train": 0, "val": 1}


@dataclass
class LabeledSample:
    """One image with its pixel-exact label map.

    image: float32 (3,H,W) in [-1,1]; labels: int64 (H,W) in {0..C-1}.
    """

    image: np.ndarray
    labels: np.ndarray


@dataclass
class DatasetSplit:
    """Supervision split over one list of samples.

    `labeled`/`unlabeled` materialize the spec-level views; the index
    lists are what gets persisted in the manifest.
    """

    samples: list = field(repr=False)
    labeled_indices: list = field(default_factory=list)
    unlabeled_indices: list = field(default_factory=list)
    regime: str = "full"
    seed: int = 0

    @property
    def labeled(self):
        return [self.samples[i] for i in self.labeled_indices]

    @property
    def unlabeled(self):
        return [self.samples[i].image for i in self.unlabeled_indices]


def class_names(num_classes: int) -> list:
    names = ["background"]
    for k in range(1, num_classes):
        base = SHAPE_TYPES[(k - 1) % len(SHAPE_TYPES)]
        rep = (k - 1) // len(SHAPE_TYPES)
        names.append(base if rep == 0 else f"{base}_{rep + 1}")
    return names


def class_palette(num_classes: int) -> np.ndarray:
    """(C,3) float32 palette in [-1,1]; class 0 is a dark background.

    Shape classes get evenly spaced hues at full saturation, so nearest-
    color classification stays unambiguous even under jitter.
    """
    if num_classes < 2:
        raise ConfigurationError(f"need num_classes >= 2, got {num_classes}")
    palette = np.zeros((num_classes, 3), dtype=np.float32)
    palette[0] = -0.85
    for k in range(1, num_classes):
        hue = (k - 1) / (num_classes - 1)
        r, g, b = colorsys.hsv_to_rgb(hue, 0.9, 0.9)
        palette[k] = np.array([r, g, b], dtype=np.float32) * 2.0 - 1.0
    return palette


def _shape_mask(kind: str, H: int, W: int, cy: float, cx: float,
                half: float) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "rectangle":
        return (np.abs(dy) <= half) & (np.abs(dx) <= 1.3 * half)
    if kind == "disk":
        return dy * dy + dx * dx <= half * half
    if kind == "triangle":
        # apex up: at depth t in [0,1] from apex the half-width grows to `half`
        t = (dy + half) / (2.0 * half)
        return (t >= 0.0) & (t <= 1.0) & (np.abs(dx) <= t * half)
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def generate_shapes_sample(seed: int, cfg: ShapesConfig) -> LabeledSample:
    """Draw one scene. Later shapes paint over earlier ones."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    H = W = cfg.resolution
    palette = class_palette(cfg.num_classes)

    labels = np.zeros((H, W), dtype=np.int64)
    image = np.broadcast_to(palette[0][:, None, None], (3, H, W)).copy()

    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    for _ in range(n_shapes):
        k = int(rng.integers(1, cfg.num_classes))
        half = 0.5 * H * rng.uniform(cfg.min_size_frac, cfg.max_size_frac)
        cy = rng.uniform(0.2 * H, 0.8 * H)
        cx = rng.uniform(0.2 * W, 0.8 * W)
        jitter = rng.normal(0.0, cfg.color_jitter, size=3)
        kind = SHAPE_TYPES[(k - 1) % len(SHAPE_TYPES)]
        mask = _shape_mask(kind, H, W, cy, cx, half)
        color = np.clip(palette[k] + jitter, -1.0, 1.0)
        image[:, mask] = color[:, None]
        labels[mask] = k

    image = image + cfg.pixel_noise * rng.standard_normal((3, H, W))
    image = np.clip(image, -1.0, 1.0).astype(np.float32)
    return LabeledSample(image=image, labels=labels)


def sample_seed(dataset_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence((dataset_seed, _SPLIT_IDS[split], index))
    return int(ss.generate_state(1)[0])


def generate_dataset(cfg: DataConfig):
    """Build (train, val) sample lists for a DataConfig."""
    cfg.validate()
    train = [
        generate_shapes_sample(sample_seed(cfg.seed, "train", i), cfg.shapes)
        for i in range(cfg.train_samples)
    ]
    val = [
        generate_shapes_sample(sample_seed(cfg.seed, "val", i), cfg.shapes)
        for i in range(cfg.val_samples)
    ]
    return train, val


def one_hot_encode(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(H,W) int labels -> (C,H,W) float32 one-hot."""
    if labels.size and labels.max() >= num_classes:
        bad = np.argwhere(labels >= num_classes)[0]
        raise DataError(
            f"label {int(labels[tuple(bad)])} >= C={num_classes} "
            f"at pixel ({int(bad[0])}, {int(bad[1])})"
        )
    if labels.size and labels.min() < 0:
        bad = np.argwhere(labels < 0)[0]
        raise DataError(f"negative label at pixel ({int(bad[0])}, {int(bad[1])})")
    onehot = np.zeros((num_classes,) + labels.shape, dtype=np.float32)
    np.put_along_axis(onehot, labels[None], 1.0, axis=0)
    return onehot


def make_split(samples, regime: str, labeled_count: int, seed: int) -> DatasetSplit:
    n = len(samples)
    if regime == "full":
        labeled, unlabeled = list(range(n)), []
    elif regime == "limited":
        # labeled and unlabeled views cover the same images
        labeled, unlabeled = list(range(n)), list(range(n))
    elif regime == "partial":
        if labeled_count > n:
            raise ConfigurationError(
                f"labeled_count {labeled_count} exceeds dataset size {n}"
            )
        perm = np.random.default_rng(seed).permutation(n)
        labeled = sorted(int(i) for i in perm[:labeled_count])
        unlabeled = sorted(int(i) for i in perm[labeled_count:])
    else:
        raise ConfigurationError(f"unknown regime {regime!r}")
    return DatasetSplit(
        samples=samples, labeled_indices=labeled,
        unlabeled_indices=unlabeled, regime=regime, seed=seed,
    )


def flip_sample(sample: LabeledSample) -> LabeledSample:
    return LabeledSample(
        image=sample.image[:, :, ::-1].copy(),
        labels=sample.labels[:, ::-1].copy(),
    )


def horizontal_flip(sample: LabeledSample, p: float,
                    rng: np.random.Generator | None = None) -> LabeledSample:
    """Flip image and labels together with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"flip probability {p} outside [0,1]")
    if p == 0.0:
        return sample
    if p < 1.0:
        if rng is None:
            raise ConfigurationError("0 < p < 1 requires an rng")
        if rng.uniform() >= p:
            return sample
    return flip_sample(sample)


# ---------------------------------------------------------------------------
# on-disk layout

def _write_pairs(directory, samples):
    os.makedirs(directory, exist_ok=True)
    for i, s in enumerate(samples):
        pngio.save_image(os.path.join(directory, f"{i:04d}_img.png"), s.image)
        pngio.save_labels(os.path.join(directory, f"{i:04d}_lab.png"), s.labels)


def dataset_manifest(cfg: DataConfig, train, val, split: DatasetSplit) -> dict:
    palette = class_palette(cfg.shapes.num_classes)
    return {
        "num_classes": cfg.shapes.num_classes,
        "resolution": cfg.shapes.resolution,
        "class_names": class_names(cfg.shapes.num_classes),
        "palette_uint8": [
            [int(v) for v in row]
            for row in np.round((palette + 1.0) * 127.5).astype(np.int64)
        ],
        "seed": cfg.seed,
        "regime": split.regime,
        "train": {
            "count": len(train),
            "labeled_indices": list(split.labeled_indices),
            "unlabeled_indices": list(split.unlabeled_indices),
        },
        "val": {"count": len(val)},
    }


def save_dataset(out_dir, cfg: DataConfig, train, val, split: DatasetSplit):
    """Write train/ and val/ PNG pairs plus the dataset.json manifest."""
    manifest = dataset_manifest(cfg, train, val, split)
    os.makedirs(out_dir, exist_ok=True)
    _write_pairs(os.path.join(out_dir, "train"), train)
    _write_pairs(os.path.join(out_dir, "val"), val)
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def build_dataset(cfg: DataConfig) -> "Dataset":
    """Generate and split in memory; manifest matches the on-disk layout."""
    train, val = generate_dataset(cfg)
    split = make_split(train, cfg.regime, cfg.labeled_count, cfg.seed)
    return Dataset(train=train, val=val, split=split,
                   manifest=dataset_manifest(cfg, train, val, split))


@dataclass
class Dataset:
    train: list
    val: list
    split: DatasetSplit
    manifest: dict

    @property
    def num_classes(self) -> int:
        return self.manifest["num_classes"]

    @property
    def resolution(self) -> int:
        return self.manifest["resolution"]


def _read_pairs(directory, count, resolution, num_classes):
    samples = []
    for i in range(count):
        img_path = os.path.join(directory, f"{i:04d}_img.png")
        lab_path = os.path.join(directory, f"{i:04d}_lab.png")
        if not os.path.exists(img_path) or not os.path.exists(lab_path):
            raise DataError(f"missing pair {i:04d} in {directory}")
        image = pngio.load_image(img_path, resolution)
        labels = pngio.load_labels(lab_path, resolution)
        if labels.max(initial=0) >= num_classes:
            bad = np.argwhere(labels >= num_classes)[0]
            raise DataError(
                f"{lab_path}: label {int(labels[tuple(bad)])} >= "
                f"C={num_classes} at pixel ({int(bad[0])}, {int(bad[1])})"
            )
        samples.append(LabeledSample(image=image, labels=labels))
    return samples


def load_dataset(root) -> Dataset:
    manifest_path = os.path.join(root, "dataset.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no dataset.json under {root}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupt manifest {manifest_path}: {exc}") from exc
    for key in ("num_classes", "resolution", "train", "val"):
        if key not in manifest:
            raise DataError(f"manifest missing key {key!r}")
    res, C = manifest["resolution"], manifest["num_classes"]
    train = _read_pairs(os.path.join(root, "train"), manifest["train"]["count"], res, C)
    val = _read_pairs(os.path.join(root, "val"), manifest["val"]["count"], res, C)
    split = DatasetSplit(
        samples=train,
        labeled_indices=list(manifest["train"]["labeled_indices"]),
        unlabeled_indices=list(manifest["train"]["unlabeled_indices"]),
        regime=manifest.get("regime", "full"),
        seed=manifest.get("seed", 0),
    )
    return Dataset(train=train, val=val, split=split, manifest=manifest)
