"""Metric tests: Gaussian fitting, Fréchet distance, FID, oracle mIoU."""

import math
import warnings

import numpy as np
import pytest
import torch

from hybridsynth.config import ShapesConfig
from hybridsynth.data import class_palette, generate_shapes_sample, sample_seed
from hybridsynth.errors import ConfigurationError, NumericalAbortError
from hybridsynth.metrics import (
    GaussianFit, IdentityExtractor, RandomConvExtractor, compute_fid,
    extract_features, frechet_distance, gaussian_fit, iou_counts, miou,
    oracle_segment,
)

# frozen oracle (notes/oracles/spd_frechet.py, mpmath dps=50):
# fixed rational mu/sigma pair below -> squared distance
FROZEN_D2 = 4.09582269550521461290434662251
MU1 = np.array([0.5, -1.0, 0.25])
MU2 = np.array([0.0, 0.5, -0.75])
S1 = np.array([[2.0, 0.5, 0.25], [0.5, 1.0, 0.1], [0.25, 0.1, 1.5]])
S2 = np.array([[1.0, -0.2, 0.0], [-0.2, 2.0, 0.3], [0.0, 0.3, 1.0]])


# ---------------------------------------------------------------------------
# gaussian_fit

def test_gaussian_fit_two_points():
    fit = gaussian_fit(np.array([[0.0, 0.0], [2.0, 0.0]]))
    assert np.allclose(fit.mu, [1.0, 0.0])
    assert np.allclose(fit.sigma, [[2.0, 0.0], [0.0, 0.0]])  # unbiased


def test_gaussian_fit_identical_points():
    fit = gaussian_fit(np.ones((5, 3)))
    assert np.allclose(fit.sigma, 0.0)


def test_gaussian_fit_monte_carlo_moments():
    rng = np.random.default_rng(0)
    n = 100000
    feats = rng.normal(loc=1.5, scale=2.0, size=(n, 3))
    fit = gaussian_fit(feats)
    # CLT: mean se = 2/sqrt(n); var se ~ sigma^2 sqrt(2/n); use 5 sigma
    assert np.abs(fit.mu - 1.5).max() < 5 * 2.0 / math.sqrt(n)
    assert np.abs(np.diag(fit.sigma) - 4.0).max() < 5 * 4.0 * math.sqrt(2.0 / n)
    off = fit.sigma - np.diag(np.diag(fit.sigma))
    assert np.abs(off).max() < 5 * 4.0 / math.sqrt(n)


def test_gaussian_fit_input_validation():
    with pytest.raises(ConfigurationError):
        gaussian_fit(np.zeros((3, 2, 2)))
    with pytest.raises(ConfigurationError):
        gaussian_fit(np.zeros((1, 4)))


def test_gaussian_fit_rank_deficiency_warning():
    with pytest.warns(UserWarning, match="rank-deficient"):
        gaussian_fit(np.random.default_rng(0).normal(size=(3, 8)))


# ---------------------------------------------------------------------------
# frechet_distance

def _fit(mu, sigma):
    return GaussianFit(mu=np.asarray(mu, float),
                       sigma=np.asarray(sigma, float), n=100)


def test_frechet_one_dimensional_unit_shift():
    a = _fit([0.0], [[1.0]])
    b = _fit([1.0], [[1.0]])
    assert abs(frechet_distance(a, b) - 1.0) < 1e-8


def test_frechet_self_distance_zero():
    g = _fit(MU1, S1)
    d = frechet_distance(g, g)
    assert d >= -1e-6
    assert abs(d) < 1e-6


def test_frechet_symmetric():
    a, b = _fit(MU1, S1), _fit(MU2, S2)
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-9


def test_frechet_matches_extended_precision_reference():
    a, b = _fit(MU1, S1), _fit(MU2, S2)
    assert abs(frechet_distance(a, b) - FROZEN_D2) < 1e-6


def test_frechet_random_spd_vs_svd_route():
    # independent path: tr sqrt(S1^{1/2} S2 S1^{1/2}) = sum svdvals(R1 R2)
    rng = np.random.default_rng(3)
    for trial in range(10):
        q1 = rng.normal(size=(3, 6))
        q2 = rng.normal(size=(3, 6))
        s1 = q1 @ q1.T / 6 + 0.1 * np.eye(3)
        s2 = q2 @ q2.T / 6 + 0.1 * np.eye(3)
        mu1, mu2 = rng.normal(size=3), rng.normal(size=3)

        def root(m):
            vals, vecs = np.linalg.eigh(m)
            return (vecs * np.sqrt(vals)) @ vecs.T

        ref = (float((mu1 - mu2) @ (mu1 - mu2))
               + np.trace(s1) + np.trace(s2)
               - 2.0 * np.linalg.svd(root(s1) @ root(s2),
                                     compute_uv=False).sum())
        got = frechet_distance(_fit(mu1, s1), _fit(mu2, s2))
        assert abs(got - ref) < 1e-8


def test_frechet_negative_eigenvalue_aborts_with_diagnostics():
    bad = np.diag([1.0, 1.0, -1e-3])
    with pytest.raises(NumericalAbortError, match="eigenvalue"):
        frechet_distance(_fit(MU1, bad), _fit(MU2, S2))


def test_frechet_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        frechet_distance(_fit([0.0], [[1.0]]), _fit(MU2, S2))


# ---------------------------------------------------------------------------
# compute_fid + extractors

def _toy_images(seed, n=32, res=8):
    rng = np.random.default_rng(seed)
    return (rng.uniform(-1, 1, size=(n, 3, res, res))).astype(np.float32)


def test_fid_identical_sets_zero():
    # n > feature dim keeps the covariance full-rank, so the numerical
    # error of the matrix square root stays at float64 scale
    imgs = _toy_images(0, n=64, res=4)
    ext = IdentityExtractor(4)
    assert abs(compute_fid(imgs, imgs.copy(), ext)) < 1e-8


def test_fid_noise_strictly_increases():
    imgs = _toy_images(1, n=64)
    rng = np.random.default_rng(2)
    noisy = imgs + rng.normal(scale=0.3, size=imgs.shape).astype(np.float32)
    ext = RandomConvExtractor(seed=1234, dim=8)
    base = compute_fid(imgs, imgs.copy(), ext)
    moved = compute_fid(imgs, noisy, ext)
    assert moved > base
    assert moved > 1e-4


def test_fid_identity_extractor_equals_pixel_moments():
    real = _toy_images(3, n=64, res=4)
    fake = _toy_images(4, n=64, res=4)
    got = compute_fid(real, fake, IdentityExtractor(4))
    want = frechet_distance(
        gaussian_fit(real.reshape(64, -1)),
        gaussian_fit(fake.reshape(64, -1)),
    )
    assert abs(got - want) < 1e-10


def test_random_extractor_frozen_by_seed():
    imgs = _toy_images(5, n=4)
    a = RandomConvExtractor(seed=7, dim=8)(imgs)
    b = RandomConvExtractor(seed=7, dim=8)(imgs)
    c = RandomConvExtractor(seed=8, dim=8)(imgs)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)
    assert a.shape == (4, 8)


def test_extract_features_empty_set_rejected():
    with pytest.raises(ConfigurationError):
        extract_features(IdentityExtractor(8), [])


def test_fid_pipeline_reproducible():
    real = _toy_images(6, n=40)
    fake = _toy_images(7, n=40)
    ext = RandomConvExtractor(seed=1234, dim=16)
    a = compute_fid(real, fake, ext)
    b = compute_fid(real.copy(), fake.copy(),
                    RandomConvExtractor(seed=1234, dim=16))
    assert abs(a - b) < 1e-6


# ---------------------------------------------------------------------------
# oracle segmentation + mIoU

def test_oracle_segment_all_background():
    pal = class_palette(4)
    img = np.broadcast_to(pal[0][:, None, None], (3, 8, 8)).copy()
    assert (oracle_segment(img, num_classes=4) == 0).all()


def test_oracle_segment_palette_permutation():
    img = generate_shapes_sample(1, ShapesConfig()).image
    pal = class_palette(4)
    perm = np.array([2, 0, 3, 1])
    base = oracle_segment(img, palette=pal)
    shuffled = oracle_segment(img, palette=pal[perm])
    assert np.array_equal(perm[shuffled], base)


def test_oracle_segment_requires_palette_or_c():
    with pytest.raises(ConfigurationError):
        oracle_segment(np.zeros((3, 4, 4)))


def test_oracle_miou_on_clean_samples():
    # frozen fixture: observed 1.000 over 256 clean val samples
    cfg = ShapesConfig()
    preds, gts = [], []
    for i in range(256):
        s = generate_shapes_sample(sample_seed(0, "val", i), cfg)
        preds.append(oracle_segment(s.image, num_classes=cfg.num_classes))
        gts.append(s.labels)
    val = miou(np.stack(preds), np.stack(gts), cfg.num_classes)
    assert val >= 0.98


def test_miou_hand_fixture():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    assert abs(miou(pred, gt, 2) - 7.0 / 12.0) < 1e-12


def test_miou_label_permutation_invariance():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 4, size=(3, 8, 8))
    pred = rng.integers(0, 4, size=(3, 8, 8))
    perm = np.array([3, 1, 0, 2])
    assert abs(miou(pred, gt, 4) - miou(perm[pred], perm[gt], 4)) < 1e-12


def test_miou_excludes_absent_classes():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    # class 2 and 3 appear nowhere: same value at C=4 as at C=2
    assert abs(miou(pred, gt, 4) - 7.0 / 12.0) < 1e-12


def test_miou_dataset_wide_accumulation():
    rng = np.random.default_rng(1)
    gt = rng.integers(0, 3, size=(4, 6, 6))
    pred = rng.integers(0, 3, size=(4, 6, 6))
    whole = miou(pred, gt, 3)
    i1, u1 = iou_counts(pred[:2], gt[:2], 3)
    i2, u2 = iou_counts(pred[2:], gt[2:], 3)
    inter, union = i1 + i2, u1 + u2
    active = union > 0
    accumulated = float((inter[active] / union[active]).mean())
    assert abs(whole - accumulated) < 1e-12


def test_iou_counts_shape_mismatch():
    with pytest.raises(ConfigurationError):
        iou_counts(np.zeros((2, 4, 4)), np.zeros((2, 4, 5)), 3)
