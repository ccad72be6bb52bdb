"""Generator-side reconstruction losses, the weighted total, and R1."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError


class TapNetwork(nn.Module):
    """Frozen four-tap convolutional feature network.

    Taps follow the relu1_2 / relu2_2 / relu3_3 / relu4_3 layout of VGG-16:
    conv stacks of depth (2, 2, 3, 3) separated by 2x max-pooling, so every
    tap is half the spatial size of the previous one. Weights are random
    (fixed seed) unless loaded from a pretrained VGG-16.
    """

    depths = (2, 2, 3, 3)

    def __init__(self, channels=(8, 16, 32, 32), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        in_ch = 3
        for depth, ch in zip(self.depths, channels):
            convs = []
            for _ in range(depth):
                conv = nn.Conv2d(in_ch, ch, 3, padding=1)
                with torch.no_grad():
                    conv.weight.normal_(0.0, (2.0 / (in_ch * 9)) ** 0.5, generator=gen)
                    conv.bias.zero_()
                convs += [conv, nn.ReLU()]
                in_ch = ch
            stages.append(nn.Sequential(*convs))
        self.stages = nn.ModuleList(stages)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        taps = []
        for i, stage in enumerate(self.stages):
            if i:
                x = F.max_pool2d(x, 2)
            x = stage(x)
            taps.append(x)
        return taps

    def pooled(self, x):
        """Concatenated global-average-pooled taps, one vector per image."""
        return torch.cat([t.mean(dim=(2, 3)) for t in self(x)], dim=1)


class VGGTaps(nn.Module):
    """Pretrained VGG-16 taps; needs torchvision weights available locally or online."""

    cuts = (4, 9, 16, 23)  # after relu1_2, relu2_2, relu3_3, relu4_3

    def __init__(self):
        super().__init__()
        try:
            from torchvision.models import VGG16_Weights, vgg16

            features = vgg16(weights=VGG16_Weights.DEFAULT).features
        except Exception as exc:  # no weights offline
            raise ConfigError(f"pretrained VGG-16 unavailable: {exc}") from exc
        self.slices = nn.ModuleList()
        start = 0
        for cut in self.cuts:
            self.slices.append(features[start:cut])
            start = cut
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        x = ((x + 1) / 2 - self.mean) / self.std
        taps = []
        for s in self.slices:
            x = s(x)
            taps.append(x)
        return taps

    def pooled(self, x):
        return torch.cat([t.mean(dim=(2, 3)) for t in self(x)], dim=1)


def build_taps(backend: str, channels=(8, 16, 32, 32), seed: int = 1234):
    if backend == "frozen_random":
        return TapNetwork(channels, seed)
    if backend == "pretrained":
        return VGGTaps()
    if backend == "off":
        return None
    raise ConfigError(f"unknown perceptual backend {backend!r}")


def l1_loss(real, synth):
    """Per-item mean |real - synth|, averaged over items and batch; inputs (B, N, 3, R, R)."""
    if real.shape != synth.shape:
        raise ValueError(f"shape mismatch {tuple(real.shape)} vs {tuple(synth.shape)}")
    return (real - synth).abs().flatten(2).mean(2).mean()


def perceptual_loss(real, synth, taps):
    """Sum over taps of mean absolute feature difference, averaged over items."""
    if real.shape != synth.shape:
        raise ValueError(f"shape mismatch {tuple(real.shape)} vs {tuple(synth.shape)}")
    if taps is None:
        return real.new_zeros(())
    flat = real.shape[-3:]
    fr = taps(real.reshape(-1, *flat))
    fs = taps(synth.reshape(-1, *flat))
    per_item = sum((a - b).abs().flatten(1).mean(1) for a, b in zip(fr, fs))
    return per_item.mean()


@dataclass
class LossWeights:
    lambda1: float = 100.0
    lambda2: float = 10.0
    lambda3: float = 10.0


def total_g_loss(gan, l1, vgg, coll, weights: LossWeights = LossWeights()):
    return gan + weights.lambda1 * l1 + weights.lambda2 * vgg + weights.lambda3 * coll


def r1_penalty(enc_logit_fn, reals, gamma: float = 10.0):
    """``gamma / 2 * E ||grad_x D_enc(x)||^2`` on the pre-sigmoid scalar head."""
    reals = reals.detach().requires_grad_(True)
    logits = enc_logit_fn(reals)
    (grad,) = torch.autograd.grad(logits.sum(), reals, create_graph=True)
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(1).mean()


def r1_due(iteration: int, every: int) -> bool:
    return iteration % every == 0


def next_r1_iteration(iteration: int, every: int) -> int:
    """First scheduled R1 iteration strictly after ``iteration``."""
    return iteration + every - iteration % every
