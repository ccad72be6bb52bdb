"""SSIM, Fréchet distance, the best-times tournament count, and run evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import OutfitRecord, given_mask_with_count, stack_batch

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# SSIM

def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def _as_batch(img) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(img) if not torch.is_tensor(img) else img).to(torch.float64)
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[None]
    return t


def ssim_maps(x, y, data_range: float = 1.0, window_size: int = 11, sigma: float = 1.5):
    """Luminance and contrast-structure maps over valid (unpadded) windows.

    Inputs are ``(C, H, W)`` or ``(B, C, H, W)`` already scaled to ``[0, data_range]``.
    """
    x, y = _as_batch(x), _as_batch(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    c = x.shape[1]
    if min(x.shape[-2:]) < window_size:
        raise ValueError(f"images smaller than the {window_size}px window")
    win = gaussian_window(window_size, sigma).expand(c, 1, window_size, window_size)
    filt = lambda t: F.conv2d(t, win, groups=c)  # noqa: E731
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x**2
    var_y = filt(y * y) - mu_y**2
    cov = filt(x * y) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    cs = (2 * cov + c2) / (var_x + var_y + c2)
    return lum, cs


def ssim(x, y, data_range: float = 1.0) -> float:
    """Mean SSIM over windows and channels, 11x11 Gaussian window (sigma 1.5)."""
    lum, cs = ssim_maps(x, y, data_range)
    return float((lum * cs).mean())


def to_unit_range(img):
    """[-1, 1] -> [0, 1]."""
    return (img + 1) / 2


# ---------------------------------------------------------------------------
# Fréchet distance

@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if self.n < 2:
            raise ValueError("feature statistics need at least 2 samples")
        if self.sigma.shape != (self.mu.size, self.mu.size):
            raise ValueError("covariance shape does not match mean")


def _check_symmetric(s: np.ndarray) -> None:
    scale = max(1.0, float(np.abs(s).max()))
    if not np.allclose(s, s.T, rtol=0.0, atol=1e-10 * scale):
        raise ValueError("covariance matrix is not symmetric")


def _psd_sqrt(s: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(s)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the cross term is taken from the eigenvalues of the symmetric
    matrix S_a^(1/2) S_b S_a^(1/2), negatives clipped to zero.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError("feature dimensions differ")
    _check_symmetric(a.sigma)
    _check_symmetric(b.sigma)
    root_a = _psd_sqrt(a.sigma)
    middle = root_a @ b.sigma @ root_a
    middle = (middle + middle.T) / 2
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(middle), 0.0, None)).sum()
    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * cross)


def stats_from_features(features: np.ndarray) -> FeatureStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("need a (n >= 2, dim) feature matrix")
    return FeatureStats(features.mean(axis=0), np.cov(features, rowvar=False), features.shape[0])


@torch.no_grad()
def feature_stats(images, extractor, batch_size: int = 64) -> FeatureStats:
    """Gaussian fit to ``extractor.pooled`` features of ``images`` (n, 3, R, R) in [-1, 1]."""
    images = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images).float()
    if images.shape[0] < 2:
        raise ValueError("feature statistics need at least 2 images")
    feats = [extractor.pooled(images[i : i + batch_size]).double() for i in range(0, len(images), batch_size)]
    return stats_from_features(torch.cat(feats).numpy())


# ---------------------------------------------------------------------------
# best-times tournament

def f2bt(table) -> np.ndarray:
    """Per method, the number of outfits where it strictly beats every other method.

    ``table`` is ``(n_methods, n_outfits)``; ties give no win.
    """
    try:
        scores = np.asarray(table, dtype=np.float64)
    except ValueError as exc:
        raise ValueError("ragged score table") from exc
    if scores.ndim != 2:
        raise ValueError("ragged score table")
    if scores.shape[0] < 2 or scores.shape[1] < 1:
        raise ValueError("need at least 2 methods and 1 outfit")
    best = scores.max(axis=0)
    is_best = scores == best
    unique = is_best.sum(axis=0) == 1
    return (is_best & unique).sum(axis=1).astype(int)


def write_score_table(path, methods: Sequence[str], table) -> None:
    table = np.asarray(table)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *[f"outfit_{j}" for j in range(table.shape[1])]])
        for name, row in zip(methods, table):
            w.writerow([name, *[repr(float(v)) for v in row]])


# ---------------------------------------------------------------------------
# compatibility predictor

class CompatibilityPredictor(Protocol):
    def score(self, outfit: torch.Tensor) -> float:
        """Compatibility of one outfit ``(N, 3, R, R)``; higher is more compatible."""


class EmbeddingSpreadPredictor:
    """Negative mean pairwise distance of collocation embeddings."""

    def __init__(self, collocation):
        self.net = collocation.eval()

    @torch.no_grad()
    def score(self, outfit: torch.Tensor) -> float:
        n = outfit.shape[0]
        c = self.net(outfit, torch.arange(n))
        d = torch.cdist(c[None], c[None])[0]
        return float(-d.sum() / (n * (n - 1)))


# ---------------------------------------------------------------------------
# run evaluation

@dataclass
class MetricReport:
    settings: list[int]
    ssim: dict[str, float]
    fid: dict[str, float]
    compat_scores: dict[str, list[float]] = field(default_factory=dict)
    f2bt: dict[str, Any] | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def table(self) -> dict[str, dict[str, float]]:
        """Rows per metric with columns ``"1" ... "Avg"``."""
        return {"SSIM": self.ssim, "FID": self.fid}

    def to_json(self) -> dict[str, Any]:
        return {
            "settings": self.settings,
            "ssim": self.ssim,
            "fid": self.fid,
            "f2bt": self.f2bt,
            "meta": self.meta,
        }


def _with_avg(per_setting: dict[str, float]) -> dict[str, float]:
    out = dict(per_setting)
    out["Avg"] = float(np.mean(list(per_setting.values())))
    return out


def evaluation_masks(n_outfits: int, n_items: int, setting: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, setting])
    return np.stack([given_mask_with_count(rng, n_items, setting) for _ in range(n_outfits)])


Synthesizer = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def model_synthesizer(extractor, generator, batch_size: int = 16) -> Synthesizer:
    from .generator import syn_outfit

    extractor.eval()
    generator.eval()

    @torch.no_grad()
    def run(images, sils, given):
        out = []
        for i in range(0, len(images), batch_size):
            comp, _ = syn_outfit(images[i : i + batch_size], sils[i : i + batch_size], given[i : i + batch_size],
                                 extractor, generator)
            out.append(comp)
        return torch.cat(out)

    return run


def oracle_synthesizer(images, sils, given):
    """Returns the ground truth; evaluation sanity baseline."""
    return images.clone()


def evaluate_run(
    synthesizer: Synthesizer,
    test: Sequence[OutfitRecord],
    settings: Sequence[int] = (1, 2, 3),
    feature_net=None,
    predictor: CompatibilityPredictor | None = None,
    seed: int = 0,
    silhouettes: np.ndarray | None = None,
    meta: Mapping[str, Any] | None = None,
) -> MetricReport:
    """SSIM / FID per given-count setting (plus their average), and per-outfit compatibility scores.

    Given masks depend only on ``(seed, setting)``, so different runs evaluated
    with the same seed see identical given items and can be compared outfit by
    outfit.
    """
    images, sils = (torch.from_numpy(a) for a in stack_batch(test))
    if silhouettes is not None:
        sils = torch.as_tensor(silhouettes).float()
    n = images.shape[1]
    ssim_vals, fid_vals, scores = {}, {}, {}
    for s in settings:
        given = torch.as_tensor(evaluation_masks(len(test), n, s, seed))
        synth = synthesizer(images, sils, given)
        target = ~given.bool()
        fake_pool, real_pool = synth[target], images[target]
        ssim_vals[str(s)] = float(
            np.mean([ssim(to_unit_range(f), to_unit_range(r)) for f, r in zip(fake_pool, real_pool)])
        )
        if feature_net is not None:
            fid_vals[str(s)] = fid(feature_stats(fake_pool, feature_net), feature_stats(real_pool, feature_net))
        if predictor is not None:
            scores[str(s)] = [predictor.score(o) for o in synth]
    return MetricReport(
        settings=list(settings),
        ssim=_with_avg(ssim_vals),
        fid=_with_avg(fid_vals) if fid_vals else {},
        compat_scores=scores,
        meta=dict(meta or {}),
    )


def tournament(reports: Mapping[str, MetricReport]) -> dict[str, Any]:
    """Best-times counts across runs, per setting and in total.

    Every report must have been produced with the same test set, settings and seed.
    """
    names = list(reports)
    if len(names) < 2:
        warnings.warn("best-times count needs at least two runs; skipped", stacklevel=2)
        return {}
    settings = reports[names[0]].settings
    out: dict[str, Any] = {}
    total = np.zeros(len(names), dtype=int)
    for s in settings:
        key = str(s)
        if any(key not in reports[m].compat_scores for m in names):
            warnings.warn("compatibility scores missing; best-times count skipped", stacklevel=2)
            return {}
        counts = f2bt([reports[m].compat_scores[key] for m in names])
        out[key] = dict(zip(names, counts.tolist()))
        total += counts
    out["Total"] = dict(zip(names, total.tolist()))
    for m in names:
        reports[m].f2bt = {k: v[m] for k, v in out.items()}
    return out


def write_report(path, reports: Mapping[str, MetricReport], extra: Mapping[str, Any] | None = None) -> None:
    doc = {name: r.to_json() for name, r in reports.items()}
    if extra:
        doc["_meta"] = dict(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
