import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from outfitgan.config import ConfigError
from outfitgan.data import (
    DegenerateMaskError,
    OutfitRecord,
    extract_silhouette,
    foreground,
    generate_synthetic_corpus,
    given_mask_with_count,
    iou,
    normalize_orientation,
    parse_given_spec,
    quantize,
    read_corpus,
    sample_given_mask,
    split_dataset,
    write_corpus,
)


def _square_image(r=64, side=32, color=(-0.5, 0.2, -1.0)):
    img = np.ones((3, r, r), dtype=np.float32)
    lo = (r - side) // 2
    img[:, lo : lo + side, lo : lo + side] = np.asarray(color, dtype=np.float32)[:, None, None]
    return img, lo


def test_corpus_is_deterministic():
    a = generate_synthetic_corpus(seed=7, n_outfits=10, resolution=64, n_categories=4)
    b = generate_synthetic_corpus(seed=7, n_outfits=10, resolution=64, n_categories=4)
    for ra, rb in zip(a.train + a.test, b.train + b.test):
        assert ra.record_id == rb.record_id
        assert ra.images.tobytes() == rb.images.tobytes()
        assert ra.silhouettes.tobytes() == rb.silhouettes.tobytes()


def test_categories_are_permutations(corpus64):
    for rec in corpus64.train + corpus64.test:
        assert sorted(rec.categories) == [0, 1, 2, 3]


@pytest.mark.parametrize("n_categories", [2, 4, 6])
def test_one_item_per_category_for_any_n(n_categories):
    split = generate_synthetic_corpus(seed=1, n_outfits=6, resolution=32, n_categories=n_categories)
    for rec in split.train + split.test:
        assert sorted(rec.categories) == list(range(n_categories))
        assert rec.images.shape == (n_categories, 3, 32, 32)


def test_within_outfit_palette_closer_than_across(corpus64):
    records = corpus64.train + corpus64.test
    palettes = np.stack(
        [[r.images[i][:, r.silhouettes[i].astype(bool)].mean(axis=1) for i in range(4)] for r in records]
    )
    within = [np.linalg.norm(p[i] - p[j]) for p in palettes for i in range(4) for j in range(i + 1, 4)]
    across = [
        np.linalg.norm(palettes[a, i] - palettes[b, j])
        for a in range(len(records))
        for b in range(a + 1, len(records))
        for i, j in ((0, 1), (2, 3))
    ]
    assert np.mean(within) < np.mean(across)


def test_bad_corpus_config():
    with pytest.raises(ConfigError):
        generate_synthetic_corpus(seed=0, n_outfits=4, resolution=48)
    with pytest.raises(ConfigError):
        generate_synthetic_corpus(seed=0, n_outfits=4, resolution=8)
    with pytest.raises(ConfigError):
        generate_synthetic_corpus(seed=0, n_outfits=4, resolution=32, n_categories=1)


def test_pixels_in_range_and_background_white(corpus64):
    rec = corpus64.train[0]
    assert np.abs(rec.images).max() <= 1.0
    bg = rec.silhouettes == 0
    assert np.all(rec.images.transpose(1, 0, 2, 3)[:, bg] == 1.0)


# -- silhouettes -----------------------------------------------------------

def test_background_only_image_is_degenerate():
    with pytest.raises(DegenerateMaskError):
        extract_silhouette(np.ones((3, 32, 32), dtype=np.float32), 0.1)


def test_centered_square_extracted_exactly():
    img, lo = _square_image()
    mask = extract_silhouette(img, 0.1)
    expected = np.zeros((64, 64), dtype=np.uint8)
    expected[lo : lo + 32, lo : lo + 32] = 1
    np.testing.assert_array_equal(mask, expected)
    assert mask.mean() == 0.25


def test_extracted_matches_stored_silhouette(corpus64):
    records = (corpus64.train + corpus64.test)[:100]
    scores = [iou(extract_silhouette(r.images[i], 0.1), r.silhouettes[i]) for r in records for i in range(4)]
    assert min(scores) >= 0.95


@settings(max_examples=30, deadline=None)
@given(
    color=st.tuples(*[st.floats(-1.0, 0.4) for _ in range(3)]),
    seed=st.integers(0, 2**16),
)
def test_silhouette_invariant_to_foreground_relabel(color, seed):
    rec = generate_synthetic_corpus(seed=seed, n_outfits=2, resolution=32).train[0]
    img = rec.images[0].copy()
    mask = extract_silhouette(img, 0.1)
    recolored = np.where(mask[None].astype(bool), np.asarray(color, np.float32)[:, None, None], img)
    np.testing.assert_array_equal(extract_silhouette(recolored, 0.1), mask)


def test_record_rejects_bad_categories(corpus64):
    rec = corpus64.train[0]
    with pytest.raises(ValueError):
        OutfitRecord("x", rec.images, rec.silhouettes, (0, 0, 1, 2))


# -- orientation -----------------------------------------------------------

def _left_item():
    img = np.ones((3, 32, 32), dtype=np.float32)
    img[:, 10:20, 2:14] = -0.5
    return img


def test_right_oriented_unchanged():
    img = _left_item()[:, :, ::-1].copy()
    assert normalize_orientation(img) is img


def test_left_oriented_mirrored():
    out = normalize_orientation(_left_item())
    fg = foreground(out)
    com = (fg.sum(axis=0) * np.arange(32)).sum() / fg.sum()
    assert com > 15.5
    np.testing.assert_array_equal(out, _left_item()[:, :, ::-1])


@settings(max_examples=30, deadline=None)
@given(x0=st.integers(0, 28), w=st.integers(2, 20), y0=st.integers(0, 20))
def test_orientation_idempotent(x0, w, y0):
    img = np.ones((3, 32, 32), dtype=np.float32)
    img[:, y0 : y0 + 8, x0 : min(32, x0 + w)] = -0.2
    once = normalize_orientation(img)
    np.testing.assert_array_equal(normalize_orientation(once), once)


def test_corpus_shoes_face_right(corpus64):
    for rec in corpus64.train[:50]:
        fg = rec.silhouettes[3]
        com = (fg.sum(axis=0) * np.arange(64)).sum() / fg.sum()
        assert com >= 31.5


# -- given masks -----------------------------------------------------------

def test_mask_sums_for_four_items():
    rng = np.random.default_rng(0)
    sums = {int(sample_given_mask(rng, 4).sum()) for _ in range(2000)}
    assert sums == {1, 2, 3}


def test_two_items_only_two_masks():
    rng = np.random.default_rng(0)
    seen = {tuple(sample_given_mask(rng, 2)) for _ in range(500)}
    assert seen == {(1, 0), (0, 1)}


def test_mask_uniformity_chi_square():
    # oracle: enumerate all 2**4 - 2 valid masks
    valid = [tuple((c >> i) & 1 for i in range(4)) for c in range(1, 15)]
    rng = np.random.default_rng(2024)
    counts = dict.fromkeys(valid, 0)
    for _ in range(14_000):
        counts[tuple(sample_given_mask(rng, 4))] += 1
    observed = np.array(list(counts.values()))
    assert observed.sum() == 14_000
    assert np.all(np.abs(observed - 1000) <= 150)
    assert stats.chisquare(observed).pvalue > 0.01


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_never_all_or_nothing(n):
    rng = np.random.default_rng(n)
    draws = np.stack([sample_given_mask(rng, n) for _ in range(20_000)])
    sums = draws.sum(axis=1)
    assert sums.min() >= 1 and sums.max() <= n - 1
    assert len({tuple(d) for d in draws}) == 2**n - 2


def test_mask_config_error():
    with pytest.raises(ConfigError):
        sample_given_mask(np.random.default_rng(0), 1)


def test_given_mask_with_count():
    rng = np.random.default_rng(0)
    for count in (1, 2, 3):
        assert all(given_mask_with_count(rng, 4, count).sum() == count for _ in range(50))
    with pytest.raises(ConfigError):
        given_mask_with_count(rng, 4, 4)


def test_parse_given_spec():
    np.testing.assert_array_equal(parse_given_spec("1,0,0,0", 4), [1, 0, 0, 0])
    for bad in ("1,1,1,1", "0,0,0,0", "1,0,0", "1,2,0,0", "a,b"):
        with pytest.raises(ConfigError):
            parse_given_spec(bad, 4)


# -- splits and disk layout --------------------------------------------------

def test_split_sizes_full_scale():
    # sizes only depend on the count, so lightweight stand-ins are enough
    class Stub:
        def __init__(self, i):
            self.record_id = f"r{i}"

    split = split_dataset([Stub(i) for i in range(20_000)], 0.8, seed=0)
    assert (len(split.train), len(split.test)) == (16_000, 4_000)


def test_split_small_and_deterministic(tiny_split):
    records = tiny_split.train + tiny_split.test
    a = split_dataset(records[:10], 0.8, seed=5)
    b = split_dataset(records[:10], 0.8, seed=5)
    assert (len(a.train), len(a.test)) == (8, 2)
    assert [r.record_id for r in a.train] == [r.record_id for r in b.train]
    assert not {r.record_id for r in a.train} & {r.record_id for r in a.test}


def test_split_errors():
    with pytest.raises(ConfigError):
        split_dataset([], 0.8, 0)


def test_corpus_round_trip(tmp_path, tiny_split):
    write_corpus(tiny_split, tmp_path)
    back = read_corpus(tmp_path)
    assert [r.record_id for r in back.train] == [r.record_id for r in tiny_split.train]
    for ra, rb in zip(back.train + back.test, tiny_split.train + tiny_split.test):
        np.testing.assert_array_equal(ra.images, rb.images)
        np.testing.assert_array_equal(ra.silhouettes, rb.silhouettes)
        assert ra.likes == rb.likes
    assert (tmp_path / "train" / tiny_split.train[0].record_id / "meta.json").exists()


def test_quantize_is_idempotent():
    x = np.random.default_rng(0).uniform(-1, 1, size=(3, 8, 8))
    q = quantize(x)
    np.testing.assert_array_equal(quantize(q), q)
