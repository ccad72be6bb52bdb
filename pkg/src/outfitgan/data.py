"""Outfit records, a procedural stand-in corpus, silhouettes and given/target masks.

Images are float32 arrays shaped ``(3, R, R)`` with values in ``[-1, 1]``; the
background is pure white ``(+1, +1, +1)``. Pixel values are always exact 8-bit
levels (``u / 127.5 - 1``) so PNG round trips are lossless.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .config import ConfigError

CATEGORY_NAMES = ("upper", "bag", "lower", "shoes")
BACKGROUND = np.ones(3, dtype=np.float32)


class DegenerateMaskError(ValueError):
    """A silhouette covers less than 1% or more than 99% of the canvas."""


def _check_resolution(resolution: int) -> None:
    if not isinstance(resolution, (int, np.integer)) or resolution < 16 or resolution & (resolution - 1):
        raise ConfigError(f"resolution must be a power of two >= 16, got {resolution!r}")


def check_silhouette(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("silhouette must be binary")
    occupancy = float(mask.mean())
    if not 0.01 <= occupancy <= 0.99:
        raise DegenerateMaskError(f"silhouette occupancy {occupancy:.4f} outside [0.01, 0.99]")
    return mask.astype(np.uint8)


@dataclass
class OutfitRecord:
    """One outfit: ``images`` (N, 3, R, R), ``silhouettes`` (N, R, R) in {0,1}.

    Items are stored in category order, so ``categories[i]`` is normally ``i``;
    the field is kept explicit to mirror the on-disk manifest.
    """

    record_id: str
    images: np.ndarray
    silhouettes: np.ndarray
    categories: tuple[int, ...]
    likes: int = 0

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float32)
        self.silhouettes = np.asarray(self.silhouettes, dtype=np.uint8)
        self.categories = tuple(int(c) for c in self.categories)
        n = len(self.categories)
        if self.images.ndim != 4 or self.images.shape[0] != n or self.images.shape[1] != 3:
            raise ValueError(f"images must be (N, 3, R, R), got {self.images.shape}")
        r = self.images.shape[-1]
        _check_resolution(r)
        if self.images.shape[-2] != r or self.silhouettes.shape != (n, r, r):
            raise ValueError("image / silhouette shape mismatch")
        if sorted(self.categories) != list(range(n)):
            raise ValueError(f"categories must be a permutation of 0..{n - 1}, got {self.categories}")
        if not np.isfinite(self.images).all() or np.abs(self.images).max() > 1.0:
            raise ValueError("pixel values must be finite and within [-1, 1]")
        for sil in self.silhouettes:
            check_silhouette(sil)
        if self.likes < 0:
            raise ValueError("likes must be non-negative")

    @property
    def n_items(self) -> int:
        return len(self.categories)

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]


@dataclass
class DatasetSplit:
    train: list[OutfitRecord]
    test: list[OutfitRecord]
    seed: int
    manifest: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self) -> None:
        overlap = {r.record_id for r in self.train} & {r.record_id for r in self.test}
        if overlap:
            raise ValueError(f"train/test overlap: {sorted(overlap)[:5]}")


# ---------------------------------------------------------------------------
# procedural shapes

def _grid(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(resolution) + 0.5) / resolution
    return np.meshgrid(c, c, indexing="ij")  # y, x in [0, 1]


def _rect(y, x, y0, y1, x0, x1):
    return (y >= y0) & (y <= y1) & (x >= x0) & (x <= x1)


def _ellipse(y, x, cy, cx, ry, rx):
    return ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


def _trapezoid(y, x, y0, y1, top, bottom):
    """Filled quad between rows y0..y1 whose x-span interpolates top -> bottom."""
    t = np.clip((y - y0) / max(y1 - y0, 1e-6), 0.0, 1.0)
    left = top[0] + t * (bottom[0] - top[0])
    right = top[1] + t * (bottom[1] - top[1])
    return (y >= y0) & (y <= y1) & (x >= left) & (x <= right)


def _upper(y, x, rng):
    w = rng.uniform(0.17, 0.22)
    top, bottom = rng.uniform(0.18, 0.24), rng.uniform(0.78, 0.88)
    body = _rect(y, x, top, bottom, 0.5 - w, 0.5 + w)
    sleeve_len = rng.uniform(0.15, 0.4)
    sleeve_w = rng.uniform(0.1, 0.14)
    sleeves = _rect(y, x, top, top + sleeve_len, 0.5 - w - sleeve_w, 0.5 + w + sleeve_w)
    neck = _ellipse(y, x, top, 0.5, rng.uniform(0.04, 0.07), rng.uniform(0.06, 0.1))
    return (body | sleeves) & ~neck


def _bag(y, x, rng):
    top, bottom = rng.uniform(0.42, 0.5), rng.uniform(0.8, 0.88)
    half = rng.uniform(0.25, 0.33)
    body = _rect(y, x, top, bottom, 0.5 - half, 0.5 + half)
    ry, rx = rng.uniform(0.16, 0.24), rng.uniform(0.14, 0.2)
    ring = _ellipse(y, x, top, 0.5, ry, rx) & ~_ellipse(y, x, top, 0.5, ry - 0.05, rx - 0.05)
    return body | (ring & (y < top))


def _lower(y, x, rng):
    top, bottom = rng.uniform(0.08, 0.14), rng.uniform(0.82, 0.92)
    half = rng.uniform(0.15, 0.2)
    if rng.random() < 0.5:
        # trousers
        waist = _rect(y, x, top, top + 0.12, 0.5 - half, 0.5 + half)
        gap = rng.uniform(0.02, 0.04)
        flare = rng.uniform(0.0, 0.06)
        left = _trapezoid(y, x, top, bottom, (0.5 - half, 0.5 - gap), (0.5 - half - flare, 0.5 - gap - 0.02))
        right = _trapezoid(y, x, top, bottom, (0.5 + gap, 0.5 + half), (0.5 + gap + 0.02, 0.5 + half + flare))
        return waist | left | right
    spread = rng.uniform(0.08, 0.16)
    return _trapezoid(y, x, top, bottom * 0.85, (0.5 - half, 0.5 + half), (0.5 - half - spread, 0.5 + half + spread))


def _shoe(y, x, rng):
    """Right-oriented shoe: bulky toe box on the right, slim heel on the left."""
    sole_y = rng.uniform(0.64, 0.7)
    sole = _rect(y, x, sole_y, sole_y + 0.07, 0.12, 0.9)
    heel = _rect(y, x, rng.uniform(0.36, 0.44), sole_y, 0.12, rng.uniform(0.3, 0.36))
    toe = _ellipse(y, x, sole_y, rng.uniform(0.58, 0.62), rng.uniform(0.16, 0.22), rng.uniform(0.28, 0.32))
    return sole | heel | (toe & (y <= sole_y))


def _generic(kind, y, x, rng):
    s = rng.uniform(0.28, 0.36)
    if kind == 0:
        return _ellipse(y, x, 0.5, 0.5, s, s * 0.7)
    if kind == 1:
        return np.abs(y - 0.5) + np.abs(x - 0.5) <= s
    if kind == 2:
        return _trapezoid(y, x, 0.5 - s, 0.5 + s, (0.48, 0.52), (0.5 - s, 0.5 + s))
    return _rect(y, x, 0.5 - s, 0.5 + s, 0.42, 0.58) | _rect(y, x, 0.42, 0.58, 0.5 - s, 0.5 + s)


_ARCHETYPES = (_upper, _bag, _lower, _shoe)


def _shape(category: int, resolution: int, rng: np.random.Generator) -> np.ndarray:
    y, x = _grid(resolution)
    if category < len(_ARCHETYPES):
        mask = _ARCHETYPES[category](y, x, rng)
    else:
        mask = _generic(category % 4, y, x, rng)
    return mask.astype(np.uint8)


@dataclass(frozen=True)
class StyleTheme:
    """Palette and texture shared by every item of one outfit."""

    base: np.ndarray
    accent: np.ndarray
    frequency: float
    angle: float
    amplitude: float

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "StyleTheme":
        # every channel <= 0.5 keeps foreground at least 0.5 away from white
        base = rng.uniform(-0.95, 0.5, size=3)
        accent = np.clip(base + rng.normal(0.0, 0.35, size=3), -1.0, 0.5)
        return cls(base, accent, rng.uniform(2.0, 6.0), rng.uniform(0.0, math.pi), rng.uniform(0.0, 1.0))


def _render(mask: np.ndarray, theme: StyleTheme, rng: np.random.Generator) -> np.ndarray:
    r = mask.shape[0]
    y, x = _grid(r)
    base = np.clip(theme.base + rng.normal(0.0, 0.04, size=3), -1.0, 0.5)
    accent = np.clip(theme.accent + rng.normal(0.0, 0.04, size=3), -1.0, 0.5)
    phase = rng.uniform(0.0, 2 * math.pi)
    wave = np.sin(2 * math.pi * theme.frequency * (x * math.cos(theme.angle) + y * math.sin(theme.angle)) + phase)
    t = theme.amplitude * (wave > 0)
    fg = base[:, None, None] * (1 - t) + accent[:, None, None] * t
    img = np.where(mask[None].astype(bool), fg, 1.0)
    return quantize(img)


def quantize(img: np.ndarray) -> np.ndarray:
    u8 = np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255)
    return (u8 / 127.5 - 1.0).astype(np.float32)


def _make_outfit(seed: int, index: int, resolution: int, n_categories: int) -> OutfitRecord:
    rng = np.random.default_rng([seed, index])
    theme = StyleTheme.sample(rng)
    images, sils = [], []
    for cat in range(n_categories):
        mask = _shape(cat, resolution, rng)
        img = _render(mask, theme, rng)
        if cat == 3 and rng.random() < 0.5:
            # left-facing shoe, undone by the orientation rule below
            img, mask = img[:, :, ::-1].copy(), mask[:, ::-1].copy()
        normalized = normalize_orientation(img)
        if normalized is not img:
            mask = np.ascontiguousarray(mask[:, ::-1])
        images.append(normalized)
        sils.append(check_silhouette(mask))
    return OutfitRecord(
        record_id=f"outfit_{index:06d}",
        images=np.stack(images),
        silhouettes=np.stack(sils),
        categories=tuple(range(n_categories)),
        likes=int(rng.integers(0, 1000)),
    )


def generate_synthetic_corpus(
    seed: int,
    n_outfits: int,
    resolution: int = 64,
    n_categories: int = 4,
    split_ratio: float = 0.8,
) -> DatasetSplit:
    """Deterministic procedural corpus, already split into train / test.

    Outfit ``k`` draws from its own substream seeded by ``(seed, k)``.
    """
    _check_resolution(resolution)
    if not isinstance(n_categories, (int, np.integer)) or n_categories < 2:
        raise ConfigError(f"n_categories must be >= 2, got {n_categories!r}")
    if n_outfits < 2:
        raise ConfigError("n_outfits must be >= 2")
    records = [_make_outfit(seed, k, resolution, n_categories) for k in range(n_outfits)]
    return split_dataset(records, split_ratio, seed)


def split_dataset(records: Sequence[OutfitRecord], ratio: float, seed: int) -> DatasetSplit:
    if not records:
        raise ConfigError("cannot split an empty record list")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"ratio must lie in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(records))
    n_train = int(math.floor(ratio * len(records)))
    train = [records[i] for i in order[:n_train]]
    test = [records[i] for i in order[n_train:]]
    manifest = {r.record_id: {"split": "train"} for r in train}
    manifest.update({r.record_id: {"split": "test"} for r in test})
    return DatasetSplit(train=train, test=test, seed=seed, manifest=manifest)


def extract_silhouette(image: np.ndarray, background_tolerance: float = 0.1) -> np.ndarray:
    """1 where the pixel's Euclidean distance from white exceeds the tolerance."""
    image = np.asarray(image, dtype=np.float32)
    dist = np.sqrt(((image - BACKGROUND[:, None, None]) ** 2).sum(axis=0))
    return check_silhouette((dist > background_tolerance).astype(np.uint8))


def foreground(image: np.ndarray, background_tolerance: float = 0.1) -> np.ndarray:
    """Like :func:`extract_silhouette` but without the occupancy check."""
    image = np.asarray(image, dtype=np.float32)
    dist = np.sqrt(((image - BACKGROUND[:, None, None]) ** 2).sum(axis=0))
    return (dist > background_tolerance).astype(np.uint8)


def normalize_orientation(image: np.ndarray, background_tolerance: float = 0.1) -> np.ndarray:
    """Mirror the item horizontally if its foreground mass sits in the left half."""
    fg = foreground(image, background_tolerance)
    if fg.sum() == 0:
        return image
    width = fg.shape[1]
    com = float((fg.sum(axis=0) * np.arange(width)).sum() / fg.sum())
    if com < (width - 1) / 2:
        return np.ascontiguousarray(image[:, :, ::-1])
    return image


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0


# ---------------------------------------------------------------------------
# given / target masks

def sample_given_mask(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform draw over the 2**n - 2 binary vectors with 1 <= sum <= n - 1."""
    if n < 2:
        raise ConfigError(f"need at least 2 items to split into given/target, got {n}")
    code = int(rng.integers(1, 2**n - 1))
    return np.array([(code >> i) & 1 for i in range(n)], dtype=np.uint8)


def sample_given_masks(rng: np.random.Generator, batch: int, n: int) -> np.ndarray:
    return np.stack([sample_given_mask(rng, n) for _ in range(batch)])


def given_mask_with_count(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    """Uniform over masks with exactly ``count`` given items."""
    if not 1 <= count <= n - 1:
        raise ConfigError(f"given count must lie in [1, {n - 1}], got {count}")
    mask = np.zeros(n, dtype=np.uint8)
    mask[rng.choice(n, size=count, replace=False)] = 1
    return mask


def parse_given_spec(spec: str, n: int) -> np.ndarray:
    """Parse ``"1,0,0,0"`` into a validated given mask."""
    try:
        values = [int(v) for v in spec.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad given spec {spec!r}") from exc
    if len(values) != n or any(v not in (0, 1) for v in values):
        raise ConfigError(f"given spec must be {n} comma-separated 0/1 values, got {spec!r}")
    if not 1 <= sum(values) <= n - 1:
        raise ConfigError("given spec needs at least one given and one target item")
    return np.array(values, dtype=np.uint8)


# ---------------------------------------------------------------------------
# batching and silhouette pools

def stack_batch(records: Sequence[OutfitRecord]) -> tuple[np.ndarray, np.ndarray]:
    """(B, N, 3, R, R) images and (B, N, R, R) silhouettes, both float32."""
    images = np.stack([r.images for r in records]).astype(np.float32)
    sils = np.stack([r.silhouettes for r in records]).astype(np.float32)
    return images, sils


def random_pool_silhouettes(
    records: Sequence[OutfitRecord], pool: Sequence[OutfitRecord], rng: np.random.Generator
) -> np.ndarray:
    """Replace each item's silhouette with one drawn from ``pool`` of the same category."""
    out = np.stack([r.silhouettes for r in records]).astype(np.float32)
    for b, rec in enumerate(records):
        for i, cat in enumerate(rec.categories):
            src = pool[int(rng.integers(len(pool)))]
            out[b, i] = src.silhouettes[src.categories.index(cat)]
    return out


# ---------------------------------------------------------------------------
# on-disk layout

def _to_png(image: np.ndarray) -> Image.Image:
    u8 = np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return Image.fromarray(np.transpose(u8, (1, 2, 0)), mode="RGB")


def _from_png(path: Path) -> np.ndarray:
    u8 = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return (np.transpose(u8, (2, 0, 1)) / 127.5 - 1.0).astype(np.float32)


def save_record(record: OutfitRecord, directory: str | Path) -> dict[str, str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for k in range(record.n_items):
        _to_png(record.images[k]).save(directory / f"item_{k}.png")
        Image.fromarray(record.silhouettes[k] * 255).save(directory / f"mask_{k}.png")
        files[f"item_{k}"] = str(directory / f"item_{k}.png")
        files[f"mask_{k}"] = str(directory / f"mask_{k}.png")
    meta = {"record_id": record.record_id, "categories": list(record.categories), "likes": record.likes}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    return files


def load_record(directory: str | Path) -> OutfitRecord:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    n = len(meta["categories"])
    images = np.stack([_from_png(directory / f"item_{k}.png") for k in range(n)])
    sils = np.stack(
        [(np.asarray(Image.open(directory / f"mask_{k}.png")) > 127).astype(np.uint8) for k in range(n)]
    )
    return OutfitRecord(meta["record_id"], images, sils, tuple(meta["categories"]), int(meta["likes"]))


def write_corpus(split: DatasetSplit, root: str | Path) -> Path:
    """Write ``root/{train,test}/<record_id>/`` plus ``root/manifest.json``."""
    root = Path(root)
    manifest: dict[str, dict] = {}
    for name, records in (("train", split.train), ("test", split.test)):
        for rec in records:
            files = save_record(rec, root / name / rec.record_id)
            rel = {k: str(Path(v).relative_to(root)) for k, v in files.items()}
            manifest[rec.record_id] = {"split": name, "files": rel}
    doc = {
        "seed": split.seed,
        "train": [r.record_id for r in split.train],
        "test": [r.record_id for r in split.test],
        "records": manifest,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    split.manifest = manifest
    return path


def read_corpus(root: str | Path) -> DatasetSplit:
    root = Path(root)
    doc = json.loads((root / "manifest.json").read_text())
    train = [load_record(root / "train" / rid) for rid in doc["train"]]
    test = [load_record(root / "test" / rid) for rid in doc["test"]]
    return DatasetSplit(train=train, test=test, seed=int(doc["seed"]), manifest=doc["records"])
