"""UNet real/fake discriminator, collocation discriminator, and their losses."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError
from .layers import EqualConv2d, EqualLinear


class RealFakeOutput(NamedTuple):
    enc_prob: torch.Tensor  # (B,)
    dec_prob_map: torch.Tensor  # (B, H, W)


class DownBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = EqualConv2d(in_ch, out_ch, 3, activation=True)
        self.conv2 = EqualConv2d(out_ch, out_ch, 3, stride=2, activation=True)

    def forward(self, x):
        return self.conv2(self.conv1(x))


class UpBlock(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch):
        super().__init__()
        self.conv1 = EqualConv2d(in_ch + skip_ch, out_ch, 3, activation=True)
        self.conv2 = EqualConv2d(out_ch, out_ch, 3, activation=True)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv2(self.conv1(torch.cat([x, skip], dim=1)))


class UNetDiscriminator(nn.Module):
    """Encoder down to 4x4 with a scalar head; decoder back up with skips to a per-pixel head."""

    def __init__(self, resolution: int, channels: int = 16, max_channels: int = 128, logit_clamp: float = 20.0):
        super().__init__()
        if resolution < 8 or resolution & (resolution - 1):
            raise ConfigError(f"resolution must be a power of two >= 8, got {resolution}")
        self.resolution = resolution
        self.logit_clamp = logit_clamp
        n_down = int(math.log2(resolution)) - 2
        chans = [min(max_channels, channels * 2**i) for i in range(n_down + 1)]
        self.from_rgb = EqualConv2d(3, chans[0], 1, activation=True)
        self.down = nn.ModuleList(DownBlock(chans[i], chans[i + 1]) for i in range(n_down))
        self.enc_head = nn.Sequential(
            EqualLinear(chans[-1] * 16, chans[-1], activation=True),
            EqualLinear(chans[-1], 1),
        )
        self.up = nn.ModuleList(UpBlock(chans[i + 1], chans[i], chans[i]) for i in reversed(range(n_down)))
        self.dec_head = EqualConv2d(chans[0], 1, 1)

    def forward(self, x, clamp: bool = True):
        """Returns ``(enc_logit (B,), dec_logit (B, H, W))``; clamped unless ``clamp=False``."""
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ValueError(f"discriminator built for {self.resolution}px, got {tuple(x.shape[-2:])}")
        h = self.from_rgb(x)
        skips = []
        for block in self.down:
            skips.append(h)
            h = block(h)
        enc = self.enc_head(h.flatten(1)).squeeze(1)
        for block, skip in zip(self.up, reversed(skips)):
            h = block(h, skip)
        dec = self.dec_head(h).squeeze(1)
        if clamp:
            c = self.logit_clamp
            enc, dec = enc.clamp(-c, c), dec.clamp(-c, c)
        return enc, dec


def dis_forward(discriminator: UNetDiscriminator, image: torch.Tensor) -> RealFakeOutput:
    enc, dec = discriminator(image)
    return RealFakeOutput(torch.sigmoid(enc), torch.sigmoid(dec))


# log D = logsigmoid(l), log(1 - D) = logsigmoid(-l)

def enc_loss(real_enc, fake_enc):
    return -F.logsigmoid(real_enc).mean() - F.logsigmoid(-fake_enc).mean()


def dec_loss(real_dec, fake_dec):
    real = -F.logsigmoid(real_dec).flatten(1).sum(1).mean()
    fake = -F.logsigmoid(-fake_dec).flatten(1).sum(1).mean()
    return real + fake


def dis_loss(real_logits, fake_logits):
    """Scalar plus pixel-wise real/fake loss from ``(enc, dec)`` logit pairs."""
    return enc_loss(real_logits[0], fake_logits[0]) + dec_loss(real_logits[1], fake_logits[1])


def gan_loss_g(fake_logits):
    enc, dec = fake_logits
    return -(F.logsigmoid(enc) + F.logsigmoid(dec).flatten(1).sum(1)).mean()


# ---------------------------------------------------------------------------
# collocation discriminator

class CollocationDiscriminator(nn.Module):
    """Embeds items into a shared compatibility space via a per-category linear map."""

    def __init__(
        self,
        resolution: int,
        n_categories: int = 4,
        channels: int = 16,
        feature_dim: int = 128,
        embed_dim: int = 128,
        n_stages: int = 4,
    ):
        super().__init__()
        self.n_categories = n_categories
        layers = [EqualConv2d(3, channels, 1, activation=True)]
        ch = channels
        for _ in range(n_stages):
            layers.append(DownBlock(ch, min(ch * 2, 256)))
            ch = min(ch * 2, 256)
        self.backbone = nn.Sequential(*layers)
        self.feature = EqualLinear(ch, feature_dim)
        self.category_maps = nn.Parameter(torch.randn(n_categories, embed_dim, feature_dim) / math.sqrt(feature_dim))

    def features(self, images):
        return self.feature(self.backbone(images).mean(dim=(2, 3)))

    def forward(self, images, categories):
        """``images`` (..., 3, R, R) and matching integer ``categories`` -> (..., embed_dim)."""
        categories = torch.as_tensor(categories, device=images.device).long()
        if categories.numel() and (categories.min() < 0 or categories.max() >= self.n_categories):
            raise ValueError("unknown category index")
        lead = images.shape[:-3]
        f = self.features(images.reshape(-1, *images.shape[-3:]))
        maps = self.category_maps[categories.expand(lead).reshape(-1)]
        return torch.einsum("bdf,bf->bd", maps, f).view(*lead, -1)


def embed_item(discriminator: CollocationDiscriminator, image: torch.Tensor, category: int) -> torch.Tensor:
    return discriminator(image.unsqueeze(0), torch.tensor([category]))[0]


def outfit_embedding(cs: torch.Tensor) -> torch.Tensor:
    """Mean over the item axis: (..., N, D) -> (..., D)."""
    return cs.mean(dim=-2)


def outfit_spread(cs: torch.Tensor) -> torch.Tensor:
    """Sum over items of squared distance to the outfit mean, per outfit."""
    return (cs - outfit_embedding(cs).unsqueeze(-2)).pow(2).sum(dim=(-1, -2))


def _hinge(values, margin):
    return values if margin is None else -F.relu(margin - values)


def collocation_dis_loss(pos1, pos2, neg, margin=None):
    """Contrastive collocation loss on (B, N, D) item embeddings.

    Pulls positive items to their outfit mean, pushes negative-outfit items away
    from theirs, and pushes the two positive outfit means apart. With ``margin``
    the two pushing terms saturate at ``margin``.
    """
    pull = outfit_spread(pos1)
    push = _hinge(outfit_spread(neg), margin)
    diverse = _hinge((outfit_embedding(pos1) - outfit_embedding(pos2)).pow(2).sum(-1), margin)
    return (pull - push - diverse).mean()


def collocation_g_loss(mixed, neg, margin=None):
    return (outfit_spread(mixed) - _hinge(outfit_spread(neg), margin)).mean()


# ---------------------------------------------------------------------------
# negatives

def negative_sources(batch: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Source outfit index per category slot for one incompatible outfit.

    Uses ``n`` distinct outfits when the batch allows, otherwise every outfit
    in the batch at least once, so the result never equals a single source.
    """
    if batch < 2:
        raise ValueError("negative sampling needs a batch of at least 2 outfits")
    if batch >= n:
        return rng.choice(batch, size=n, replace=False)
    perm = rng.permutation(batch)
    src = np.array([perm[i % batch] for i in range(n)])
    rng.shuffle(src)
    return src


def negative_batch(x: torch.Tensor, rng: np.random.Generator, count: int | None = None) -> torch.Tensor:
    """Build ``count`` (default B) negatives from ``x`` shaped (B, N, ...), slot by slot."""
    b, n = x.shape[:2]
    count = b if count is None else count
    src = torch.as_tensor(np.stack([negative_sources(b, n, rng) for _ in range(count)]), device=x.device)
    slots = torch.arange(n, device=x.device).expand(count, n)
    return x[src, slots]


def sample_negative_outfit(batch, rng: np.random.Generator):
    """Record-level negative: item ``k`` comes from outfit ``src[k]`` of ``batch``."""
    from .data import OutfitRecord

    if len(batch) < 2:
        raise ValueError("negative sampling needs a batch of at least 2 outfits")
    n = batch[0].n_items
    src = negative_sources(len(batch), n, rng)
    images, sils = [], []
    for k in range(n):
        rec = batch[int(src[k])]
        slot = rec.categories.index(k)
        images.append(rec.images[slot])
        sils.append(rec.silhouettes[slot])
    rid = "neg_" + "_".join(batch[int(s)].record_id for s in src)
    return OutfitRecord(rid, np.stack(images), np.stack(sils), tuple(range(n)))
