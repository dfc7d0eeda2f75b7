"""Training objectives.

Unconditional pair: standard non-saturating BCE on the image logit, in
softplus form. Conditional pair: weighted per-pixel cross-entropy over
C+1 channels where channel C is the "fake" class; real pixels are pushed
to their labeled class with inverse-frequency weights, fake pixels to the
fake channel, and the generator pushes fake pixels back to the
conditioning classes. R1 penalizes the gradient norm of the image logit
on real images. LabelMix enforces logit consistency between a
class-coherent mix of real and fake and the same mix of their logit maps.

Stable forms only: softplus and log_softmax throughout; the naive
-log(sigmoid(x)) belongs to the test oracles, not here.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import InternalError


def loss_d_uncond(logit_real: torch.Tensor, logit_fake: torch.Tensor):
    """mean softplus(-r) + mean softplus(f)."""
    return F.softplus(-logit_real).mean() + F.softplus(logit_fake).mean()


def loss_g_uncond(logit_fake: torch.Tensor):
    """mean softplus(-f), the non-saturating generator loss."""
    return F.softplus(-logit_fake).mean()


def class_weights(seg_batch: torch.Tensor) -> torch.Tensor:
    """Inverse-frequency weights over a one-hot batch (N,C,H,W).

    alpha_k = 1 / (freq_k * C_present) for classes present in the batch,
    0 for absent ones, so a uniform batch yields all-ones weights.
    """
    counts = seg_batch.sum(dim=(0, 2, 3))
    total = seg_batch.shape[0] * seg_batch.shape[2] * seg_batch.shape[3]
    freq = counts / total
    present = freq > 0
    c_present = int(present.sum())
    alpha = torch.zeros_like(freq)
    if c_present:
        alpha[present] = 1.0 / (freq[present] * c_present)
    return alpha


def _weighted_pixel_ce(pixel_logits, seg, alpha):
    # -sum_k alpha_k s_k log softmax(logits)_k, averaged over batch and pixels
    logp = F.log_softmax(pixel_logits, dim=1)
    c = seg.shape[1]
    w = alpha[:c].reshape(1, c, 1, 1)
    return -(w * seg * logp[:, :c]).sum(dim=1).mean()


def loss_d_cond(pixel_logits_real, seg, pixel_logits_fake, alpha):
    """Real pixels to their class (weighted), fake pixels to channel C."""
    real_term = _weighted_pixel_ce(pixel_logits_real, seg, alpha)
    fake_term = -F.log_softmax(pixel_logits_fake, dim=1)[:, -1].mean()
    return real_term + fake_term


def loss_g_cond(pixel_logits_fake, seg, alpha):
    """Fake pixels pushed toward their conditioning classes (weighted)."""
    return _weighted_pixel_ce(pixel_logits_fake, seg, alpha)


def r1_penalty(x_real: torch.Tensor, disc_head, gamma: float = 10.0,
               lazy_interval: int = 1):
    """(gamma/2) * mean ||d image_logit / d x||^2, scaled by the lazy interval.

    `disc_head` maps an image batch to per-sample scalar logits. The
    penalty keeps a graph so it can be backpropagated into D's params.
    """
    if not x_real.requires_grad:
        raise InternalError("r1_penalty input must require grad")
    logits = disc_head(x_real)
    if not logits.requires_grad:
        # constant discriminator: gradient w.r.t. the input is identically 0
        return x_real.new_zeros(())
    grads = torch.autograd.grad(
        outputs=logits.sum(), inputs=x_real, create_graph=True,
        allow_unused=True,
    )[0]
    if grads is None:
        # logits carry grad from elsewhere but not from x_real
        return x_real.new_zeros(())
    norm2 = grads.reshape(grads.shape[0], -1).pow(2).sum(dim=1)
    return 0.5 * gamma * lazy_interval * norm2.mean()


def labelmix_mask(seg: torch.Tensor, seed: int | None = None,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """Fair per-class coin per sample; mask follows argmax class regions."""
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else seed)
    n, c = seg.shape[0], seg.shape[1]
    coins = (torch.rand(n, c, generator=generator) < 0.5).to(seg.dtype)
    labels = seg.argmax(dim=1)  # (N,H,W)
    mask = torch.gather(
        coins, 1, labels.reshape(n, -1)
    ).reshape(n, 1, *labels.shape[1:])
    return mask


def _pixel_logits(disc, x):
    try:
        out = disc(x, need_image=False, need_pixels=True)
    except TypeError:
        out = disc(x)
    return out.pixel_logits if hasattr(out, "pixel_logits") else out


def labelmix_image(x_real, x_fake, mask):
    """Blend real and fake pixelwise: mask selects real."""
    return mask * x_real + (1.0 - mask) * x_fake


def labelmix_loss(x_real, x_fake, mask, disc,
                  pixel_real=None, pixel_fake=None, pixel_mix=None):
    """MSE between D(mix) and the mix of D(real), D(fake) pixel logits.

    Precomputed pixel logits (including D's response to the mixed image)
    may be passed to avoid redundant forwards; otherwise they are
    computed here.
    """
    if pixel_real is None:
        pixel_real = _pixel_logits(disc, x_real)
    if pixel_fake is None:
        pixel_fake = _pixel_logits(disc, x_fake)
    if pixel_mix is None:
        pixel_mix = _pixel_logits(disc, labelmix_image(x_real, x_fake, mask))
    target = mask * pixel_real + (1.0 - mask) * pixel_fake
    return ((pixel_mix - target) ** 2).mean()
