"""Pyramid style extractor.

Given items are encoded by a three-scale CNN (a strided main pipeline with a
pooled side branch per scale). Each scale's visual vector is concatenated with
a learned category embedding, run through a per-scale Bi-LSTM over the item
sequence, and mapped by a per-scale MLP onto a contiguous group of style layers.
Non-given items contribute exactly zero visual features, so their styles come
entirely from the sequence model.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import ConfigError
from .layers import EqualConv2d, EqualLinear


def n_style_layers(resolution: int) -> int:
    """Number of per-layer style vectors consumed at ``resolution`` (2 per level from 4px)."""
    if resolution < 4 or resolution & (resolution - 1):
        raise ConfigError(f"resolution must be a power of two >= 4, got {resolution}")
    return 2 * int(math.log2(resolution)) - 2


def head_groups(k: int) -> tuple[int, int, int]:
    """Split ``k`` style layers into (low, middle, high) groups; 14 -> (5, 4, 5)."""
    outer = math.ceil(5 * k / 14)
    middle = k - 2 * outer
    if middle < 0:
        raise ConfigError(f"cannot split {k} style layers into three groups")
    return outer, middle, outer


class BackboneStage(nn.Module):
    """Main-pipeline stage: stride-2 downsample then a 3x3 refinement."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.down = EqualConv2d(in_ch, out_ch, 3, stride=2, activation=True)
        self.conv = EqualConv2d(out_ch, out_ch, 3, activation=True)

    def forward(self, x):
        return self.conv(self.down(x))


class SideBranch(nn.Module):
    """conv -> global average pool -> linear projection to ``d_v``."""

    def __init__(self, ch, d_v):
        super().__init__()
        self.conv = EqualConv2d(ch, ch, 3, activation=True)
        self.lin = EqualLinear(ch, d_v)

    def forward(self, f):
        return self.lin(self.conv(f).mean(dim=(2, 3)))


class BiLSTM(nn.Module):
    """Single-layer bidirectional LSTM returning ``backward ⊕ forward`` per position."""

    def __init__(self, in_dim, hidden):
        super().__init__()
        self.hidden = hidden
        self.lstm = nn.LSTM(in_dim, hidden, num_layers=1, batch_first=True, bidirectional=True)

    def forward(self, seq):
        out, _ = self.lstm(seq)  # (B, N, 2H) as [forward, backward]
        fwd, bwd = out[..., : self.hidden], out[..., self.hidden :]
        return torch.cat([bwd, fwd], dim=-1)


class StyleMLP(nn.Module):
    """``layers - 1`` hidden layers, then ``n_heads`` heads of ``style_dim`` each."""

    def __init__(self, in_dim, width, layers, n_heads, style_dim):
        super().__init__()
        if layers < 1:
            raise ConfigError("mlp_layers must be >= 1")
        body = []
        dim = in_dim
        for _ in range(layers - 1):
            body.append(EqualLinear(dim, width, activation=True))
            dim = width
        self.body = nn.Sequential(*body)
        self.heads = EqualLinear(dim, n_heads * style_dim) if n_heads else None
        self.n_heads = n_heads
        self.style_dim = style_dim

    def forward(self, m):
        lead = m.shape[:-1]
        if self.heads is None:
            return m.new_zeros(*lead, 0, self.style_dim)
        return self.heads(self.body(m)).view(*lead, self.n_heads, self.style_dim)


class PyramidStyleExtractor(nn.Module):
    def __init__(
        self,
        resolution: int,
        n_items: int = 4,
        channels=(32, 64, 128),
        d_v: int = 256,
        d_cat: int = 50,
        hidden: int = 256,
        mlp_layers: int = 4,
        mlp_width: int = 512,
        style_dim: int = 512,
        n_scales: int = 3,
    ):
        super().__init__()
        if n_scales != 3:
            raise ConfigError("only the three-scale pyramid is implemented (extractor.n_scales=3)")
        if len(channels) != 3:
            raise ConfigError("extractor.channels needs one entry per scale")
        if resolution < 16 or resolution & (resolution - 1):
            raise ConfigError(f"resolution must be a power of two >= 16, got {resolution}")
        self.resolution = resolution
        self.n_items = n_items
        self.n_layers = n_style_layers(resolution)
        self.groups = head_groups(self.n_layers)
        self.style_dim = style_dim

        chans = [3, *channels]
        self.main = nn.ModuleList(BackboneStage(chans[j], chans[j + 1]) for j in range(3))
        self.side = nn.ModuleList(SideBranch(chans[j + 1], d_v) for j in range(3))
        self.category = nn.Embedding(n_items, d_cat * n_items)
        self.lstms = nn.ModuleList(BiLSTM(d_v + d_cat * n_items, hidden) for _ in range(3))
        self.mlps = nn.ModuleList(StyleMLP(2 * hidden, mlp_width, mlp_layers, g, style_dim) for g in self.groups)

    def _categories(self, images, categories):
        if categories is None:
            b, n = images.shape[:2]
            return torch.arange(n, device=images.device).expand(b, n)
        return torch.as_tensor(categories, device=images.device).long()

    def pyramid(self, images: torch.Tensor, given: torch.Tensor) -> list[torch.Tensor]:
        """Visual vectors per scale, each (B, N, d_v); exactly zero for non-given items."""
        b, n, c, h, w = images.shape
        if h != self.resolution or w != self.resolution:
            raise ConfigError(f"extractor built for {self.resolution}px, got {h}x{w}")
        keep = given.to(torch.bool).view(b, n, 1, 1, 1)
        f = torch.where(keep, images, torch.zeros((), dtype=images.dtype)).reshape(b * n, c, h, w)
        feats = []
        for conv_main, side in zip(self.main, self.side):
            f = conv_main(f)
            v = side(f).view(b, n, -1)
            feats.append(torch.where(keep.view(b, n, 1), v, torch.zeros((), dtype=v.dtype)))
        return feats

    def middle(self, feats, categories) -> list[torch.Tensor]:
        cat = self.category(categories)
        return [lstm(torch.cat([v, cat], dim=-1)) for lstm, v in zip(self.lstms, feats)]

    def map_styles(self, middles) -> torch.Tensor:
        groups = [mlp(m) for mlp, m in zip(self.mlps, middles)]
        return torch.cat(groups, dim=2)

    def forward(self, images, given, categories=None) -> torch.Tensor:
        """Style codes ``(B, N, K, style_dim)`` for every item, given or not.

        ``images`` is ``(B, N, 3, R, R)`` and ``given`` is ``(B, N)`` in {0, 1}.
        """
        categories = self._categories(images, categories)
        if categories.max() >= self.n_items or categories.min() < 0:
            raise ValueError("category index out of range")
        return self.map_styles(self.middle(self.pyramid(images, given), categories))
