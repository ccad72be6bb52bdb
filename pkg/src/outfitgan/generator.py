"""Outfit generator built from silhouette-and-style (S-S) fusion blocks.

Synthesis starts from a learned 4x4 constant and doubles resolution level by
level. Every block concatenates the item's silhouette (area-downsampled and
re-binarized) as an extra channel, then applies a 3x3 convolution whose
weights are modulated by an affine map of that block's style vector and
demodulated to unit L2 norm per output channel.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError
from .extractor import n_style_layers
from .layers import EqualConv2d, EqualLinear


def modulate_demodulate(weight: torch.Tensor, style: torch.Tensor, eps: float = 1e-8, affine=None) -> torch.Tensor:
    """Scale conv weights per input channel by ``style`` and renormalize per output channel.

    ``weight`` is ``(O, I, k, k)``; ``style`` is ``(I,)`` or ``(B, I)`` and is taken
    to be already affine-transformed unless ``affine`` is given. Returns
    ``(O, I, k, k)`` or ``(B, O, I, k, k)`` accordingly.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if affine is not None:
        style = affine(style)
    if not torch.isfinite(style).all():
        raise FloatingPointError("non-finite style vector")
    batched = style.dim() == 2
    s = style if batched else style.unsqueeze(0)
    if s.shape[1] != weight.shape[1]:
        raise ValueError(f"style has {s.shape[1]} entries, weight has {weight.shape[1]} input channels")
    w = weight.unsqueeze(0) * s[:, None, :, None, None]
    w = w * torch.rsqrt(w.pow(2).sum(dim=(2, 3, 4), keepdim=True) + eps)
    return w if batched else w[0]


def demodulation_scale(weight: torch.Tensor, style: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Per-output-channel factor ``1 / ||s * w||`` that :func:`modulate_demodulate` applies; (B, O)."""
    if not torch.isfinite(style).all():
        raise FloatingPointError("non-finite style vector")
    return torch.rsqrt((weight.pow(2).sum(dim=(2, 3)).unsqueeze(0) * style.pow(2)[:, None, :]).sum(-1) + eps)


def downsample_mask(mask: torch.Tensor, size: int) -> torch.Tensor:
    """Area-average a (B, 1, R, R) binary mask to ``size`` and re-binarize at 0.5."""
    r = mask.shape[-1]
    if r % size:
        raise ValueError(f"silhouette resolution {r} is not a multiple of feature size {size}")
    if r != size:
        mask = F.avg_pool2d(mask, r // size)
    return (mask >= 0.5).to(mask.dtype)


class SSFusionBlock(nn.Module):
    def __init__(self, in_ch, out_ch, style_dim=512, upsample=False, kernel_size=3, eps=1e-8):
        super().__init__()
        self.conv_in = in_ch + 1  # + silhouette channel
        self.weight = nn.Parameter(torch.randn(out_ch, self.conv_in, kernel_size, kernel_size))
        self.affine = EqualLinear(style_dim, self.conv_in, bias_init=1.0)
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.upsample = upsample
        self.eps = eps
        self.padding = kernel_size // 2

    def forward(self, x, silhouette, style):
        """``x`` (B, C, h, w), ``silhouette`` (B, 1, R, R), ``style`` (B, style_dim)."""
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        b, c, h, w = x.shape
        if h != w:
            raise ValueError("feature maps must be square")
        m = downsample_mask(silhouette, h)
        x = torch.cat([x, m], dim=1)
        s = self.affine(style)
        # conv(x, s*w) * d == conv(s*x, w) * d: same per-item weights, one shared conv
        out = F.conv2d(x * s[:, :, None, None], self.weight, padding=self.padding)
        out = out * demodulation_scale(self.weight, s, self.eps)[:, :, None, None]
        return F.leaky_relu(out + self.bias.view(1, -1, 1, 1), 0.2)

    def modulated_weights(self, style):
        """Explicit per-item weights ``(B, O, I, k, k)`` equivalent to :meth:`forward`."""
        return modulate_demodulate(self.weight, self.affine(style), self.eps)


class OutfitGenerator(nn.Module):
    """Maps ``K`` style vectors and one silhouette to an RGB image in [-1, 1]."""

    def __init__(self, resolution: int, style_dim: int = 512, base_channels: int = 16, max_channels: int = 128):
        super().__init__()
        if resolution < 8 or resolution & (resolution - 1):
            raise ConfigError(f"resolution must be a power of two >= 8, got {resolution}")
        self.resolution = resolution
        self.style_dim = style_dim
        self.n_layers = n_style_layers(resolution)
        levels = [2**p for p in range(2, int(math.log2(resolution)) + 1)]
        chans = [min(max_channels, base_channels * resolution // r) for r in levels]
        self.const = nn.Parameter(torch.randn(1, chans[0], 4, 4))
        blocks = []
        prev = chans[0]
        for i, ch in enumerate(chans):
            blocks.append(SSFusionBlock(prev, ch, style_dim, upsample=i > 0))
            blocks.append(SSFusionBlock(ch, ch, style_dim))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = EqualConv2d(prev, 3, 1)
        assert len(self.blocks) == self.n_layers

    def forward(self, styles: torch.Tensor, silhouettes: torch.Tensor) -> torch.Tensor:
        """``styles`` (B, K, style_dim), ``silhouettes`` (B, R, R) or (B, 1, R, R)."""
        if styles.shape[1] != self.n_layers:
            raise ConfigError(f"generator consumes {self.n_layers} style vectors, got {styles.shape[1]}")
        if silhouettes.dim() == 3:
            silhouettes = silhouettes.unsqueeze(1)
        if silhouettes.shape[-1] != self.resolution:
            raise ValueError("silhouette must be at full output resolution")
        silhouettes = silhouettes.to(styles.dtype)
        x = self.const.to(styles.dtype).expand(styles.shape[0], -1, -1, -1)
        for k, block in enumerate(self.blocks):
            x = block(x, silhouettes, styles[:, k])
        return torch.tanh(self.to_rgb(x))


def syn_outfit(images, silhouettes, given, extractor, generator, categories=None):
    """Synthesize every item, then keep the real pixels for given items.

    ``images`` (B, N, 3, R, R), ``silhouettes`` (B, N, R, R), ``given`` (B, N).
    Returns ``(composited, raw)``, both (B, N, 3, R, R).
    """
    b, n = images.shape[:2]
    styles = extractor(images, given, categories)  # (B, N, K, D)
    raw = generator(styles.reshape(b * n, *styles.shape[2:]), silhouettes.reshape(b * n, *silhouettes.shape[2:]))
    raw = raw.view_as(images)
    keep = given.to(torch.bool).view(b, n, 1, 1, 1)
    return torch.where(keep, images, raw), raw
