"""Hybrid generator: two style networks feeding one shared synthesis net.

The unconditional path maps a latent z through an MLP to a base spatial
style map and grows it with conv+upsample layers; the conditional path
concatenates a spatially replicated 64-dim noise field to the one-hot
segmentation map and downsamples it with convs. Either path emits one
style map per synthesis resolution; a Gumbel-Softmax over channels turns
every map into a per-site simplex (noisy in train mode, plain softmax in
eval). The synthesis network starts from a learned constant and applies,
per resolution, two modulated conv blocks plus an unmodulated 1x1 skip,
upsampling between resolutions, ending in a 1x1 projection to RGB with
tanh.

A modulated block standardizes its input per channel per image
(x - mean) / (std + 1e-8), scales by gamma and shifts by beta obtained
from the style map through a 1x1 affine conv ("A", gamma = 1 + raw), and
then applies a 3x3 conv and leaky ReLU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig, num_levels
from .errors import ConfigurationError, DataError, InternalError

NORM_EPS = 1e-8
LRELU_SLOPE = 0.2


@dataclass
class StylePyramid:
    maps: list  # base resolution first, each (N, S_ch, H_r, W_r)
    source: str  # "unconditional" | "conditional"


def sample_latent(n: int, dim: int, seed: int | None = None,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    if n < 1:
        raise ConfigurationError(f"batch size must be >= 1, got {n}")
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else seed)
    return torch.randn(n, dim, generator=generator)


def gumbel_softmax(x: torch.Tensor, tau: float, mode: str = "eval",
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """Channel softmax with Gumbel noise in train mode (soft, no hard pass)."""
    if tau <= 0:
        raise ConfigurationError(f"gumbel temperature must be > 0, got {tau}")
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"unknown gumbel mode {mode!r}")
    if mode == "train":
        u = torch.rand(x.shape, generator=generator, dtype=x.dtype)
        inner = -torch.log(u.clamp_min(1e-20))
        x = x - torch.log(inner.clamp_min(1e-20))
    return F.softmax(x / tau, dim=1)


def _flush_mask(std: torch.Tensor, mean: torch.Tensor) -> torch.Tensor:
    # a constant map's nonzero "spread" is float rounding residue of the
    # mean (<= ~6e-8 * |mean|); flush it to exact zero instead of
    # amplifying noise, and keep the backward's 1/std finite
    return std <= 1e-6 * mean.abs()


def standardize(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Per-channel per-image standardization over the spatial dims.

    Biased (1/HW) variance; eps lands in the denominator's std. Maps
    that are constant up to float rounding normalize to exactly zero.
    """
    mean = x.mean(dim=(2, 3), keepdim=True)
    centered = x - mean
    std = centered.pow(2).mean(dim=(2, 3), keepdim=True).sqrt()
    y = centered / (std + eps)
    return torch.where(_flush_mask(std, mean), torch.zeros_like(y), y)


class _StandardizeModulate(torch.autograd.Function):
    """Fused standardize + (1 + gamma_raw) * xhat + beta.

    One autograd node instead of the ~15 the op chain would create; the
    forward reproduces standardize() kernel-for-kernel so the gamma=1,
    beta=0 identity stays bitwise exact.
    """

    @staticmethod
    def forward(ctx, x, gamma_raw, beta):
        mean = x.mean(dim=(2, 3), keepdim=True)
        centered = x - mean
        std = centered.pow(2).mean(dim=(2, 3), keepdim=True).sqrt()
        flush = _flush_mask(std, mean)
        y = centered / (std + NORM_EPS)
        y = torch.where(flush, torch.zeros_like(y), y)
        ctx.save_for_backward(y, std, gamma_raw, flush)
        return (1.0 + gamma_raw) * y + beta

    @staticmethod
    def backward(ctx, g):
        y, std, gamma_raw, flush = ctx.saved_tensors
        gy = g * (1.0 + gamma_raw)
        # y = c / (std + eps) with std = sqrt(mean c^2) and c = x - mean x:
        #   dL/dc = gy/(std+eps) - y * mean_hw(gy*y) / std
        #   dL/dx = dL/dc - mean_hw(dL/dc)
        # flushed maps took the constant-0 branch: their dx is 0, and
        # masking first keeps the 1/std finite (std > 0 on live maps)
        safe_std = torch.where(flush, torch.ones_like(std), std)
        dc = gy / (std + NORM_EPS) \
            - y * ((gy * y).mean(dim=(2, 3), keepdim=True) / safe_std)
        dc = torch.where(flush, torch.zeros_like(dc), dc)
        dx = dc - dc.mean(dim=(2, 3), keepdim=True)
        return dx, g * y, g


def init_generator_weights(module: nn.Module):
    """N(0, 0.02^2) scaled down by sqrt(fan_in); biases zero."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            nn.init.normal_(m.weight, std=0.02 / math.sqrt(fan_in))
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.02 / math.sqrt(m.in_features))
            nn.init.zeros_(m.bias)


class ModulatedBlock(nn.Module):
    """standardize -> gamma * x + beta (from style via 1x1 "A") -> conv -> lrelu."""

    def __init__(self, in_ch: int, out_ch: int, style_ch: int):
        super().__init__()
        self.in_ch = in_ch
        self.affine = nn.Conv2d(style_ch, 2 * in_ch, kernel_size=1)
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)

    def forward(self, x, style):
        if x.shape[2:] != style.shape[2:]:
            raise InternalError(
                f"feature {tuple(x.shape[2:])} vs style {tuple(style.shape[2:])} "
                f"spatial mismatch"
            )
        raw = self.affine(style)
        mod = _StandardizeModulate.apply(
            x, raw[:, : self.in_ch], raw[:, self.in_ch:])
        return F.leaky_relu(self.conv(mod), LRELU_SLOPE, inplace=True)


class SynthesisLevel(nn.Module):
    """Two modulated blocks at a fixed width, upsample (if not last),
    unmodulated 1x1 skip.

    The channel change to the next level's width rides on the upsample
    conv; the skip mirrors it so both paths agree in shape at the add.
    """

    def __init__(self, width, out_ch, style_ch, upsample: bool, mode: str):
        super().__init__()
        self.upsample = upsample
        self.mode = mode
        self.block1 = ModulatedBlock(width, width, style_ch)
        self.block2 = ModulatedBlock(width, width, style_ch)
        self.skip = nn.Conv2d(width, out_ch, kernel_size=1)
        if upsample:
            if mode == "nearest":
                self.upconv = nn.Conv2d(width, out_ch, kernel_size=3, padding=1)
            else:
                self.upconv = nn.ConvTranspose2d(
                    width, out_ch, kernel_size=4, stride=2, padding=1
                )

    def forward(self, x, style):
        m = self.block2(self.block1(x, style), style)
        if self.upsample:
            if self.mode == "nearest":
                m = self.upconv(F.interpolate(m, scale_factor=2, mode="nearest"))
            else:
                m = self.upconv(m)
        s = self.skip(x)
        if self.upsample:
            s = F.interpolate(s, scale_factor=2, mode="nearest")
        return m + s


class SynthesisNet(nn.Module):
    def __init__(self, cfg: ModelConfig, resolution: int):
        super().__init__()
        self.levels_count = num_levels(cfg.base_resolution, resolution)
        self.const = nn.Parameter(
            torch.randn(cfg.channels[0], cfg.base_resolution, cfg.base_resolution)
        )
        levels = []
        for i in range(self.levels_count):
            last = i == self.levels_count - 1
            out_ch = cfg.channels[i] if last else cfg.channels[i + 1]
            levels.append(SynthesisLevel(
                cfg.channels[i], out_ch, cfg.style_channels,
                upsample=not last, mode=cfg.upsample,
            ))
        self.levels = nn.ModuleList(levels)
        self.to_rgb = nn.Conv2d(cfg.channels[-1], 3, kernel_size=1)

    def forward(self, pyramid: StylePyramid) -> torch.Tensor:
        if len(pyramid.maps) != self.levels_count:
            raise InternalError(
                f"pyramid has {len(pyramid.maps)} levels, "
                f"network expects {self.levels_count}"
            )
        n = pyramid.maps[0].shape[0]
        x = self.const.unsqueeze(0).expand(n, -1, -1, -1)
        for level, style in zip(self.levels, pyramid.maps):
            x = level(x, style)
        return torch.tanh(self.to_rgb(x))


class UncondStyleNet(nn.Module):
    """z -> MLP -> base style map -> conv+upsample chain, one map per level."""

    def __init__(self, cfg: ModelConfig, resolution: int):
        super().__init__()
        self.base = cfg.base_resolution
        self.style_ch = cfg.style_channels
        self.levels_count = num_levels(cfg.base_resolution, resolution)
        layers = []
        width = cfg.latent_dim
        for _ in range(cfg.mapping_layers):
            layers += [nn.Linear(width, cfg.mapping_hidden),
                       nn.LeakyReLU(LRELU_SLOPE)]
            width = cfg.mapping_hidden
        layers.append(nn.Linear(width, cfg.style_channels * self.base * self.base))
        self.mapping = nn.Sequential(*layers)
        self.grow = nn.ModuleList([
            nn.Conv2d(cfg.style_channels, cfg.style_channels, 3, padding=1)
            for _ in range(self.levels_count - 1)
        ])

    def forward(self, z, tau: float, mode: str,
                generator: torch.Generator | None = None) -> StylePyramid:
        n = z.shape[0]
        raw = self.mapping(z).reshape(n, self.style_ch, self.base, self.base)
        raws = [raw]
        for conv in self.grow:
            raw = conv(F.interpolate(F.leaky_relu(raw, LRELU_SLOPE),
                                     scale_factor=2, mode="nearest"))
            raws.append(raw)
        maps = [gumbel_softmax(r, tau, mode, generator) for r in raws]
        return StylePyramid(maps=maps, source="unconditional")


class CondStyleNet(nn.Module):
    """(one-hot seg ++ replicated noise) -> downsampling convs -> per-level maps."""

    def __init__(self, cfg: ModelConfig, num_classes: int, resolution: int):
        super().__init__()
        self.num_classes = num_classes
        self.resolution = resolution
        self.noise_dim = cfg.cond_noise_dim
        self.levels_count = num_levels(cfg.base_resolution, resolution)
        hid = cfg.cond_hidden
        self.stem = nn.Conv2d(num_classes + cfg.cond_noise_dim, hid, 3, padding=1)
        self.down = nn.ModuleList([
            nn.Conv2d(hid, hid, 3, stride=2, padding=1)
            for _ in range(self.levels_count - 1)
        ])
        self.heads = nn.ModuleList([
            nn.Conv2d(hid, cfg.style_channels, 1)
            for _ in range(self.levels_count)
        ])

    def forward(self, seg, z64, tau: float, mode: str,
                generator: torch.Generator | None = None) -> StylePyramid:
        n, c, h, w = seg.shape
        if c != self.num_classes or h != self.resolution or w != self.resolution:
            raise DataError(
                f"seg map shape {tuple(seg.shape[1:])} does not match configured "
                f"({self.num_classes}, {self.resolution}, {self.resolution})"
            )
        if z64.shape != (n, self.noise_dim):
            raise DataError(
                f"noise shape {tuple(z64.shape)} != ({n}, {self.noise_dim})"
            )
        field = z64[:, :, None, None].expand(n, self.noise_dim, h, w)
        x = F.leaky_relu(self.stem(torch.cat([seg, field], dim=1)),
                         LRELU_SLOPE, inplace=True)
        feats = [x]  # highest resolution first
        for conv in self.down:
            x = F.leaky_relu(conv(x), LRELU_SLOPE, inplace=True)
            feats.append(x)
        feats = feats[::-1]  # base resolution first, matching synthesis order
        maps = [
            gumbel_softmax(head(f), tau, mode, generator)
            for head, f in zip(self.heads, feats)
        ]
        return StylePyramid(maps=maps, source="conditional")


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig, num_classes: int, resolution: int,
                 gumbel_tau: float = 1.0):
        super().__init__()
        self.cfg = cfg
        self.num_classes = num_classes
        self.resolution = resolution
        self.gumbel_tau = gumbel_tau
        self.uncond_style = UncondStyleNet(cfg, resolution)
        self.cond_style = CondStyleNet(cfg, num_classes, resolution)
        self.synthesis = SynthesisNet(cfg, resolution)
        init_generator_weights(self)

    def _mode(self) -> str:
        return "train" if self.training else "eval"

    def uncond_styles(self, z, generator=None) -> StylePyramid:
        return self.uncond_style(z, self.gumbel_tau, self._mode(), generator)

    def cond_styles(self, seg, z64, generator=None) -> StylePyramid:
        return self.cond_style(seg, z64, self.gumbel_tau, self._mode(), generator)

    def synthesize(self, pyramid: StylePyramid) -> torch.Tensor:
        return self.synthesis(pyramid)

    def generate_uncond(self, z, generator=None) -> torch.Tensor:
        return self.synthesize(self.uncond_styles(z, generator))

    def generate_cond(self, z64, seg, generator=None) -> torch.Tensor:
        return self.synthesize(self.cond_styles(seg, z64, generator))
