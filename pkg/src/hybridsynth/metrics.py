"""Evaluation: Fréchet distances over pluggable features, oracle mIoU.

The Fréchet machinery is the standard FID recipe: fit Gaussian moments to
feature sets, then d² = ||mu1-mu2||² + Tr(S1 + S2 - 2(S1 S2)^{1/2}). The
matrix square root is taken via symmetric eigendecomposition of
S1^{1/2} S2 S1^{1/2}; eigenvalues below -1e-8 abort with diagnostics,
tiny negatives in [-1e-8, 0) are clipped to zero.

LOUD CAVEAT: the default desk-scale feature extractor is a small frozen
randomly initialized conv net (seed in config), not Inception-v3. Scores
are comparable across runs of this package and nothing else; do not put
them next to published FID numbers. A pretrained extractor can be
plugged in through the same interface (callable batch -> features with a
`dim` attribute).

mIoU accumulates intersections and unions over the whole evaluation set
before dividing (standard segmentation-benchmark convention); classes
absent from both prediction and ground truth are excluded from the mean.
The oracle segmenter classifies each pixel to the nearest class palette
color and is only meaningful for the synthetic shapes family.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import class_palette
from .errors import ConfigurationError, NumericalAbortError

EIG_CLIP = -1e-8


@dataclass
class GaussianFit:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def gaussian_fit(features: np.ndarray) -> GaussianFit:
    """Sample mean and unbiased covariance of an (N,F) feature matrix."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ConfigurationError(f"features must be (N,F), got {feats.shape}")
    n, f = feats.shape
    if n < 2:
        raise ConfigurationError(f"need at least 2 samples to fit, got {n}")
    if n < f:
        warnings.warn(
            f"fitting {f}-dim Gaussian with only {n} samples; "
            f"covariance will be rank-deficient",
            stacklevel=2,
        )
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (n - 1)
    sigma = (sigma + sigma.T) / 2.0
    return GaussianFit(mu=mu, sigma=sigma, n=n)


def _psd_eigvals(mat: np.ndarray, what: str) -> np.ndarray:
    vals = np.linalg.eigvalsh((mat + mat.T) / 2.0)
    if vals.min(initial=0.0) < EIG_CLIP:
        raise NumericalAbortError(
            f"{what} has eigenvalue {vals.min():.3e} < {EIG_CLIP}; "
            f"spectrum range [{vals.min():.3e}, {vals.max():.3e}]"
        )
    return np.clip(vals, 0.0, None)


def frechet_distance(g1: GaussianFit, g2: GaussianFit) -> float:
    if g1.mu.shape != g2.mu.shape:
        raise ConfigurationError(
            f"feature dims differ: {g1.mu.shape} vs {g2.mu.shape}"
        )
    # S1^{1/2} through its own eigendecomposition
    vals1, vecs1 = np.linalg.eigh((g1.sigma + g1.sigma.T) / 2.0)
    if vals1.min(initial=0.0) < EIG_CLIP:
        raise NumericalAbortError(
            f"covariance 1 has eigenvalue {vals1.min():.3e} < {EIG_CLIP}"
        )
    root1 = (vecs1 * np.sqrt(np.clip(vals1, 0.0, None))) @ vecs1.T
    inner = root1 @ g2.sigma @ root1
    cross_vals = _psd_eigvals(inner, "S1^{1/2} S2 S1^{1/2}")
    diff = g1.mu - g2.mu
    dist = float(
        diff @ diff + np.trace(g1.sigma) + np.trace(g2.sigma)
        - 2.0 * np.sqrt(cross_vals).sum()
    )
    if not np.isfinite(dist):
        raise NumericalAbortError(
            f"non-finite Fréchet distance; traces "
            f"{np.trace(g1.sigma):.3e}/{np.trace(g2.sigma):.3e}, "
            f"cross spectrum [{cross_vals.min():.3e}, {cross_vals.max():.3e}]"
        )
    return dist


def compute_fid(real_images, fake_images, extractor) -> float:
    real = extract_features(extractor, real_images)
    fake = extract_features(extractor, fake_images)
    return frechet_distance(gaussian_fit(real), gaussian_fit(fake))


# ---------------------------------------------------------------------------
# feature extractors

def extract_features(extractor, images) -> np.ndarray:
    if len(images) == 0:
        raise ConfigurationError("cannot extract features from an empty set")
    if isinstance(images, (list, tuple)):
        images = np.stack(images)
    return np.asarray(extractor(images), dtype=np.float64)


class IdentityExtractor:
    """Flattens pixels; turns compute_fid into a pixel-space Fréchet distance."""

    def __init__(self, resolution: int):
        self.dim = 3 * resolution * resolution

    def __call__(self, images) -> np.ndarray:
        arr = np.asarray(images, dtype=np.float64)
        return arr.reshape(arr.shape[0], -1)


class RandomConvExtractor:
    """Frozen fixed-seed random conv net; the desk-scale FID feature source.

    Three stride-2 convs with leaky ReLU, then global average pooling to
    `dim` features. Weights depend only on (seed, dim), never trained.
    """

    def __init__(self, seed: int = 1234, dim: int = 64, batch: int = 64):
        self.seed = seed
        self.dim = dim
        self.batch = batch
        gen = torch.Generator()
        gen.manual_seed(seed)
        widths = [3, 32, dim, dim]
        self.weights = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            std = (2.0 / (cin * 9)) ** 0.5
            w = torch.randn(cout, cin, 3, 3, generator=gen) * std
            self.weights.append(w)

    def __call__(self, images) -> np.ndarray:
        if isinstance(images, np.ndarray):
            images = torch.from_numpy(images)
        images = images.float()
        feats = []
        with torch.no_grad():
            for i in range(0, images.shape[0], self.batch):
                x = images[i:i + self.batch]
                for w in self.weights:
                    x = torch.nn.functional.conv2d(x, w, stride=2, padding=1)
                    x = torch.nn.functional.leaky_relu(x, 0.2)
                feats.append(x.mean(dim=(2, 3)).double().numpy())
        return np.concatenate(feats, axis=0)


# ---------------------------------------------------------------------------
# segmentation metrics

def oracle_segment(image, palette: np.ndarray | None = None,
                   num_classes: int | None = None) -> np.ndarray:
    """Nearest-palette-color label map for shapes-family images.

    Accepts (3,H,W) or a batch (N,3,H,W); pass either the palette or C.
    """
    if palette is None:
        if num_classes is None:
            raise ConfigurationError("oracle_segment needs a palette or C")
        palette = class_palette(num_classes)
    img = np.asarray(image, dtype=np.float64)
    single = img.ndim == 3
    if single:
        img = img[None]
    # (N,1,3,H,W) vs (C,3,1,1) -> (N,C,H,W) squared distances
    d2 = ((img[:, None] - palette[None, :, :, None, None]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1).astype(np.int64)
    return labels[0] if single else labels


def iou_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int):
    """Per-class (intersection, union) pixel counts over the whole batch."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ConfigurationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    for k in range(num_classes):
        p, g = pred == k, gt == k
        inter[k] = np.logical_and(p, g).sum()
        union[k] = np.logical_or(p, g).sum()
    return inter, union


def miou(pred, gt, num_classes: int) -> float:
    """Dataset-wide mIoU; classes absent from both sides are excluded."""
    inter, union = iou_counts(pred, gt, num_classes)
    active = union > 0
    if not active.any():
        return 0.0
    return float((inter[active] / union[active]).mean())


# ---------------------------------------------------------------------------
# full evaluation

@dataclass
class MetricsReport:
    fid_mean: float
    fid_std: float
    cfid_mean: float
    cfid_std: float
    miou_mean: float
    miou_std: float
    sets: int
    n_samples: int
    fid_values: list = field(default_factory=list)
    cfid_values: list = field(default_factory=list)
    miou_values: list = field(default_factory=list)
    class_iou: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fid": {"mean": self.fid_mean, "std": self.fid_std,
                    "values": self.fid_values},
            "cfid": {"mean": self.cfid_mean, "std": self.cfid_std,
                     "values": self.cfid_values},
            "miou": {"mean": self.miou_mean, "std": self.miou_std,
                     "values": self.miou_values},
            "class_iou": self.class_iou,
            "sets": self.sets,
            "n_samples": self.n_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [
            "metrics report",
            f"  sets        = {self.sets}",
            f"  samples/set = {self.n_samples}",
            f"  fid         = {self.fid_mean:.4f} +/- {self.fid_std:.4f}",
            f"  cfid        = {self.cfid_mean:.4f} +/- {self.cfid_std:.4f}",
            f"  miou        = {self.miou_mean:.4f} +/- {self.miou_std:.4f}",
            "",
            "  (fid/cfid use the package's frozen random-feature extractor;",
            "   values are not comparable to Inception-based numbers)",
            "",
            "  per-class IoU (averaged over sets):",
        ]
        for name, val in self.class_iou.items():
            shown = "absent" if val is None else f"{val:.4f}"
            lines.append(f"    {name:<16} {shown}")
        return "\n".join(lines) + "\n"


def evaluate(gen, dataset, extractor, n_samples: int, sets: int = 5,
             base_seed: int = 7000, batch: int = 64) -> MetricsReport:
    """FID / CFID / oracle mIoU, averaged over `sets` seeded sample sets.

    The real reference is the validation split for both FID and CFID;
    conditional samples reuse validation label maps (cycled if
    n_samples exceeds the split).
    """
    from .data import one_hot_encode  # local import to avoid cycle at module load

    if n_samples < 1:
        raise ConfigurationError(f"n_samples must be >= 1, got {n_samples}")
    if sets < 1:
        raise ConfigurationError(f"sets must be >= 1, got {sets}")

    num_classes = dataset.num_classes
    palette = class_palette(num_classes)
    names = dataset.manifest.get(
        "class_names", [str(k) for k in range(num_classes)]
    )
    real_images = np.stack([s.image for s in dataset.val])
    real_fit = gaussian_fit(extract_features(extractor, real_images))

    was_training = gen.training
    gen.eval()
    z_dim = gen.cfg.latent_dim
    noise_dim = gen.cfg.cond_noise_dim

    fids, cfids, mious = [], [], []
    inter_total = np.zeros(num_classes, dtype=np.int64)
    union_total = np.zeros(num_classes, dtype=np.int64)
    val_n = len(dataset.val)

    for set_idx in range(sets):
        g = torch.Generator()
        g.manual_seed(base_seed + set_idx)

        uncond_feats, cond_feats = [], []
        inter = np.zeros(num_classes, dtype=np.int64)
        union = np.zeros(num_classes, dtype=np.int64)
        with torch.no_grad():
            for start in range(0, n_samples, batch):
                nb = min(batch, n_samples - start)
                z = torch.randn(nb, z_dim, generator=g)
                imgs = gen.generate_uncond(z)
                uncond_feats.append(extract_features(extractor, imgs.numpy()))

                idx = [(start + j) % val_n for j in range(nb)]
                seg = torch.from_numpy(np.stack([
                    one_hot_encode(dataset.val[i].labels, num_classes)
                    for i in idx
                ]))
                z64 = torch.randn(nb, noise_dim, generator=g)
                cimgs = gen.generate_cond(z64, seg)
                cond_feats.append(extract_features(extractor, cimgs.numpy()))

                pred = oracle_segment(cimgs.numpy(), palette)
                gt = np.stack([dataset.val[i].labels for i in idx])
                di, du = iou_counts(pred, gt, num_classes)
                inter += di
                union += du

        fit_u = gaussian_fit(np.concatenate(uncond_feats))
        fit_c = gaussian_fit(np.concatenate(cond_feats))
        fids.append(frechet_distance(real_fit, fit_u))
        cfids.append(frechet_distance(real_fit, fit_c))
        active = union > 0
        mious.append(float((inter[active] / union[active]).mean())
                     if active.any() else 0.0)
        inter_total += inter
        union_total += union

    if was_training:
        gen.train()

    class_iou = {}
    for k in range(num_classes):
        class_iou[names[k]] = (
            float(inter_total[k] / union_total[k]) if union_total[k] else None
        )

    def _ms(vals):
        arr = np.asarray(vals, dtype=np.float64)
        return float(arr.mean()), float(arr.std())

    fid_m, fid_s = _ms(fids)
    cfid_m, cfid_s = _ms(cfids)
    miou_m, miou_s = _ms(mious)
    return MetricsReport(
        fid_mean=fid_m, fid_std=fid_s, cfid_mean=cfid_m, cfid_std=cfid_s,
        miou_mean=miou_m, miou_std=miou_s, sets=sets, n_samples=n_samples,
        fid_values=fids, cfid_values=cfids, miou_values=mious,
        class_iou=class_iou,
    )
