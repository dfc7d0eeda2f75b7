"""Shared micro-configs and finite-difference helpers for the test suite."""

import numpy as np
import pytest
import torch

from hybridsynth.config import ModelConfig

torch.set_num_threads(1)

MICRO_RESOLUTION = 8


def micro_model_cfg() -> ModelConfig:
    """2-level, <=8-channel network small enough for finite differences."""
    return ModelConfig(
        base_resolution=4,
        channels=(8, 8),
        style_channels=4,
        latent_dim=6,
        cond_noise_dim=4,
        mapping_layers=2,
        mapping_hidden=8,
        cond_hidden=8,
        disc_stem_channels=4,
        disc_channels=(8, 8),
        disc_head_channels=8,
        aspp_rates=(1, 2),
        aspp_channels=8,
        extractor_dim=8,
    )


def random_onehot(n, c, h, w, seed=0) -> torch.Tensor:
    """Random hard one-hot segmentation batch (float64)."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, c, size=(n, h, w))
    onehot = np.zeros((n, c, h, w), dtype=np.float64)
    for k in range(c):
        onehot[:, k][labels == k] = 1.0
    return torch.from_numpy(onehot)


def fd_param_grads(fn, params, step=1e-4):
    """Central finite differences of scalar fn() w.r.t. each parameter."""
    grads = []
    with torch.no_grad():
        for p in params:
            flat = p.reshape(-1)
            g = torch.zeros(flat.numel(), dtype=torch.float64)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                hi = float(fn())
                flat[i] = orig - step
                lo = float(fn())
                flat[i] = orig
                g[i] = (hi - lo) / (2.0 * step)
            grads.append(g.reshape(p.shape))
    return grads


def analytic_param_grads(fn, params):
    for p in params:
        p.grad = None
    fn().backward()
    return [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
            for p in params]


def assert_param_grads_match(fn, params, rtol=1e-3, atol=1e-7, step=1e-4):
    analytic = analytic_param_grads(fn, params)
    fd = fd_param_grads(fn, params, step=step)
    for a, f, p in zip(analytic, fd, params):
        np.testing.assert_allclose(
            a.numpy(), f.numpy(), rtol=rtol, atol=atol,
            err_msg=f"gradient mismatch on parameter of shape {tuple(p.shape)}",
        )


def converge_spectral_state(module, iters=50):
    """Run extra power iterations so every SN buffer sits at its fixpoint."""
    from hybridsynth.discriminator import SNConv2d, spectral_normalize

    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, SNConv2d):
                spectral_normalize(m.conv.weight, m.u, n_iter=iters,
                                   update_state=True)


@pytest.fixture
def tiny_seed():
    torch.manual_seed(0)
    np.random.seed(0)
    return 0
