"""U-Net discriminator with a shared encoder and two heads.

Encoder ResBlocks carry no spectral norm; the decoder's convs are all
spectrally normalized (1 power-iteration step per training forward,
state persisted). The whole-image head is conv -> global average pool ->
linear. The pixel head runs ASPP over the bottleneck, then upsampling
ResBlocks with encoder skip concats, ending in a 1x1 conv to C+1
channels where channel C means "fake".
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ConfigurationError, DataError

LRELU_SLOPE = 0.2
_SN_EPS = 1e-12


@dataclass
class DiscOutput:
    image_logit: torch.Tensor | None  # (N,)
    pixel_logits: torch.Tensor | None  # (N, C+1, H, W)


def _l2norm(v: torch.Tensor) -> torch.Tensor:
    return v / (v.norm() + _SN_EPS)


def spectral_normalize(weight: torch.Tensor, u: torch.Tensor, n_iter: int = 1,
                       update_state: bool = True):
    """Divide weight by its estimated top singular value.

    `u` is the persistent power-iteration state (shape = rows of the
    2-D reshaped weight). Returns (normalized weight, sigma estimate).
    """
    if n_iter < 1:
        raise ConfigurationError(f"n_iter must be >= 1, got {n_iter}")
    w2 = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        u_loc = u.clone()
        for _ in range(n_iter):
            v_loc = _l2norm(w2.t().detach() @ u_loc)
            u_loc = _l2norm(w2.detach() @ v_loc)
        if update_state:
            u.copy_(u_loc)
    sigma = torch.dot(u_loc, w2 @ v_loc)
    return weight / (sigma + _SN_EPS), sigma


class SNConv2d(nn.Module):
    """Conv2d whose weight passes through spectral normalization."""

    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=0):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size,
                              stride=stride, padding=padding)
        self.register_buffer("u", _l2norm(torch.randn(out_ch)))

    def forward(self, x):
        w, _ = spectral_normalize(self.conv.weight, self.u,
                                  n_iter=1, update_state=self.training)
        return F.conv2d(x, w, self.conv.bias,
                        stride=self.conv.stride, padding=self.conv.padding)


class ResBlockD(nn.Module):
    """Two 3x3 convs + 1x1 shortcut, both branches avg-pooled 2x."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), LRELU_SLOPE, inplace=True)
        h = F.leaky_relu(self.conv2(h), LRELU_SLOPE, inplace=True)
        h = F.avg_pool2d(h, 2)
        return h + F.avg_pool2d(self.shortcut(x), 2)


class ResBlockU(nn.Module):
    """Decoder block after skip concat; every conv spectrally normalized."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = SNConv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = SNConv2d(out_ch, out_ch, 3, padding=1)
        self.shortcut = SNConv2d(in_ch, out_ch, 1)

    def forward(self, x):
        h = F.leaky_relu(self.conv1(x), LRELU_SLOPE, inplace=True)
        h = F.leaky_relu(self.conv2(h), LRELU_SLOPE, inplace=True)
        return h + self.shortcut(x)


class ASPP(nn.Module):
    """Parallel dilated 3x3 convs fused by a 1x1 conv. Not spectral-normalized."""

    def __init__(self, in_ch, out_ch, rates):
        super().__init__()
        self.rates = tuple(rates)
        self.branches = nn.ModuleList([
            nn.Conv2d(in_ch, out_ch, 3, padding=r, dilation=r) for r in self.rates
        ])
        self.fuse = nn.Conv2d(out_ch * len(self.rates), out_ch, 1)

    def forward(self, x):
        dim = min(x.shape[2], x.shape[3])
        bad = [r for r in self.rates if r > dim]
        if bad:
            raise ConfigurationError(
                f"aspp rate {max(bad)} exceeds spatial dim {dim}"
            )
        feats = [F.leaky_relu(b(x), LRELU_SLOPE, inplace=True) for b in self.branches]
        return F.leaky_relu(self.fuse(torch.cat(feats, dim=1)), LRELU_SLOPE, inplace=True)


class Discriminator(nn.Module):
    def __init__(self, cfg: ModelConfig, num_classes: int, resolution: int):
        super().__init__()
        self.num_classes = num_classes
        self.resolution = resolution
        widths = cfg.disc_channels
        self.stem = nn.Conv2d(3, cfg.disc_stem_channels, 3, padding=1)
        blocks, in_ch = [], cfg.disc_stem_channels
        for w in widths:
            blocks.append(ResBlockD(in_ch, w))
            in_ch = w
        self.blocks = nn.ModuleList(blocks)

        self.head_conv = nn.Conv2d(widths[-1], cfg.disc_head_channels, 3, padding=1)
        self.head_fc = nn.Linear(cfg.disc_head_channels, 1)

        self.aspp = ASPP(widths[-1], cfg.aspp_channels, cfg.aspp_rates)
        # skip channels top-down: deepest recorded skip first
        skip_ch = [cfg.disc_stem_channels] + list(widths[:-1])
        dec, d_in = [], cfg.aspp_channels
        for sc in reversed(skip_ch):
            d_out = max(sc, 16)
            dec.append(ResBlockU(d_in + sc, d_out))
            d_in = d_out
        self.decoder = nn.ModuleList(dec)
        self.classify = SNConv2d(d_in, num_classes + 1, 1)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=LRELU_SLOPE,
                                        nonlinearity="leaky_relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.kaiming_normal_(m.weight, a=LRELU_SLOPE,
                                        nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)

    def encode(self, x):
        if x.shape[1] != 3 or x.shape[2] != self.resolution \
                or x.shape[3] != self.resolution:
            raise DataError(
                f"expected (N,3,{self.resolution},{self.resolution}), "
                f"got {tuple(x.shape)}"
            )
        h = F.leaky_relu(self.stem(x), LRELU_SLOPE, inplace=True)
        skips = [h]
        for block in self.blocks:
            h = block(h)
            skips.append(h)
        return skips[:-1], h  # bottleneck excluded from the skip list

    def uncond_head(self, bottleneck):
        h = F.leaky_relu(self.head_conv(bottleneck), LRELU_SLOPE, inplace=True)
        return self.head_fc(h.mean(dim=(2, 3))).squeeze(1)

    def decode(self, aspp_out, skips):
        h = aspp_out
        for block, skip in zip(self.decoder, reversed(skips)):
            h = F.interpolate(h, size=skip.shape[2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1))
        return self.classify(h)

    def forward(self, x, need_image=True, need_pixels=True) -> DiscOutput:
        skips, bottleneck = self.encode(x)
        image_logit = self.uncond_head(bottleneck) if need_image else None
        pixel_logits = None
        if need_pixels:
            pixel_logits = self.decode(self.aspp(bottleneck), skips)
        return DiscOutput(image_logit=image_logit, pixel_logits=pixel_logits)
