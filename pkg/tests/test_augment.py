import colorsys
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from padensemble.augment import (
    AugmentError,
    JitterFactors,
    JitterSpec,
    PaddingSpec,
    apply_jitter,
    balance_corpus,
    copy_rng,
    crop_back,
    jitter_pixels,
    manifest_rows,
    pad_to,
    plan_oversample,
    read_manifest,
    size_image,
    write_manifest,
)
from padensemble.corpus import ImageSample, compute_stats

from conftest import solid


def random_image(rng, h, w, sample_id="x", label=None):
    return ImageSample(sample_id, rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8), label)


# --- padding ----------------------------------------------------------------


def test_pad_center_offsets(rng):
    img = random_image(rng, 100, 80)
    out = pad_to(img, PaddingSpec(120, 120))
    assert out.pixels.shape == (120, 120, 3)
    np.testing.assert_array_equal(out.pixels[10:110, 20:100], img.pixels)
    assert out.id == img.id and out.label == img.label


def test_pad_identity_when_target_sized(rng):
    img = random_image(rng, 7, 9)
    out = pad_to(img, PaddingSpec(7, 9))
    np.testing.assert_array_equal(out.pixels, img.pixels)


def test_pad_single_pixel_top_left_enumerated():
    img = solid("w", 1, 1, value=255)
    out = pad_to(img, PaddingSpec(3, 3, fill_value=(0, 0, 0), placement="top_left"))
    nonzero = [(r, c) for r in range(3) for c in range(3) if out.pixels[r, c].any()]
    assert nonzero == [(0, 0)]
    assert out.pixels.shape[:2] == (3, 3)


def test_pad_fill_value_everywhere_else(rng):
    img = random_image(rng, 3, 2)
    spec = PaddingSpec(6, 5, fill_value=(1, 2, 3))
    out = pad_to(img, spec)
    top, left = spec.offset(3, 2)
    mask = np.ones((6, 5), dtype=bool)
    mask[top : top + 3, left : left + 2] = False
    assert (out.pixels[mask] == np.array([1, 2, 3], dtype=np.uint8)).all()


def test_pad_too_large():
    with pytest.raises(AugmentError, match="exceeds"):
        pad_to(solid("big", 5, 3), PaddingSpec(4, 10))


def test_padding_spec_validation():
    with pytest.raises(AugmentError):
        PaddingSpec(4, 4, placement="bottom")
    with pytest.raises(AugmentError):
        PaddingSpec(4, 4, fill_value=(0, 0, 256))


@settings(max_examples=100, deadline=None)
@given(
    h=st.integers(1, 20), w=st.integers(1, 20), dh=st.integers(0, 10), dw=st.integers(0, 10),
    placement=st.sampled_from(["center", "top_left"]), seed=st.integers(0, 1000),
)
def test_pad_round_trip(h, w, dh, dw, placement, seed):
    img = random_image(np.random.default_rng(seed), h, w)
    spec = PaddingSpec(h + dh, w + dw, placement=placement)
    np.testing.assert_array_equal(crop_back(pad_to(img, spec), spec, h, w), img.pixels)


def test_size_image_modes(rng):
    img = random_image(rng, 10, 6)
    spec = PaddingSpec(8, 8)
    assert size_image(img, "resize", spec).pixels.shape == (8, 8, 3)
    cropped = size_image(img, "crop", spec)
    assert cropped.pixels.shape == (8, 8, 3)
    # height cropped 10 -> 8 from row 1, width 6 padded to 8 at column 1
    np.testing.assert_array_equal(cropped.pixels[:, 1:7], img.pixels[1:9])
    with pytest.raises(AugmentError):
        size_image(img, "stretch", spec)


# --- jitter -----------------------------------------------------------------


def _oracle_jitter(pixels, f: JitterFactors):
    """Per-pixel reference using colorsys for the hue step."""
    x = pixels.astype(float)
    gray = lambda p: 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
    clamp = lambda v: min(max(v, 0.0), 255.0)
    if f.brightness != 1.0:
        x = np.vectorize(lambda v: clamp(v * f.brightness))(x)
    if f.contrast != 1.0:
        m = np.mean([gray(p) for p in x.reshape(-1, 3)])
        x = np.vectorize(lambda v: clamp(f.contrast * v + (1 - f.contrast) * m))(x)
    if f.saturation != 1.0:
        out = np.empty_like(x)
        for idx in np.ndindex(x.shape[:2]):
            g = gray(x[idx])
            out[idx] = [clamp(f.saturation * v + (1 - f.saturation) * g) for v in x[idx]]
        x = out
    if f.hue != 0.0:
        out = np.empty_like(x)
        for idx in np.ndindex(x.shape[:2]):
            h, s, v = colorsys.rgb_to_hsv(*(x[idx] / 255.0))
            out[idx] = [clamp(c * 255.0) for c in colorsys.hsv_to_rgb((h + f.hue) % 1.0, s, v)]
        x = out
    return np.rint(x).astype(np.uint8)


def test_jitter_zero_deltas_identity(rng):
    img = random_image(rng, 9, 7)
    out = apply_jitter(img, JitterSpec.identity(), np.random.default_rng(0))
    np.testing.assert_array_equal(out.pixels, img.pixels)


def test_jitter_brightness_clamps():
    gray = np.full((4, 4, 3), 128, dtype=np.uint8)
    out = jitter_pixels(gray, JitterFactors(brightness=2.0))
    assert (out == 255).all()  # 128 * 2 = 256 -> 255
    half = jitter_pixels(gray, JitterFactors(brightness=0.5))
    assert (half == 64).all()


@pytest.mark.parametrize(
    "factors",
    [
        JitterFactors(brightness=1.3),
        JitterFactors(contrast=0.6),
        JitterFactors(saturation=1.7),
        JitterFactors(hue=0.11),
        JitterFactors(hue=-0.3),
        JitterFactors(1.1, 0.85, 1.2, 0.04),
    ],
)
def test_jitter_matches_per_pixel_oracle(rng, factors):
    px = rng.integers(0, 256, size=(5, 6, 3), dtype=np.uint8)
    got = jitter_pixels(px, factors).astype(int)
    want = _oracle_jitter(px, factors).astype(int)
    # identical arithmetic up to float rounding at .5 boundaries
    assert np.abs(got - want).max() <= 1


def test_jitter_deterministic_and_id_suffix(rng):
    img = random_image(rng, 6, 6, sample_id="src")
    spec = JitterSpec(seed=3)
    a = apply_jitter(img, spec, copy_rng(5, "src", 2), copy_index=2)
    b = apply_jitter(img, spec, copy_rng(5, "src", 2), copy_index=2)
    assert a == b
    assert a.id == "src__jit2"


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 10_000))
def test_jitter_properties(h, w, seed):
    r = np.random.default_rng(seed)
    img = random_image(r, h, w)
    ident = apply_jitter(img, JitterSpec.identity(), r)
    np.testing.assert_array_equal(ident.pixels, img.pixels)
    out = apply_jitter(img, JitterSpec(0.5, 0.5, 0.5, 0.5), r)
    assert out.pixels.shape == (h, w, 3) and out.pixels.dtype == np.uint8


def test_jitter_spec_domains():
    with pytest.raises(AugmentError):
        JitterSpec(brightness_delta=-0.1)
    with pytest.raises(AugmentError):
        JitterSpec(hue_delta=0.6)


# --- oversampling -----------------------------------------------------------


def _labeled(counts, size=3):
    return [solid(f"c{c}_{i:02d}", size, size, value=40 * (c + 2), label=c) for c, n in counts.items() for i in range(n)]


def test_plan_oxml_counts():
    corpus = _labeled({-1: 36, 0: 14, 1: 12})
    plan = plan_oversample(compute_stats(corpus), corpus, seed=0)
    assert plan.additional_copies == {-1: 0, 0: 22, 1: 24}
    assert 62 + plan.total_copies == 108


def test_plan_balanced_is_noop():
    corpus = _labeled({-1: 5, 0: 5, 1: 5})
    plan = plan_oversample(compute_stats(corpus), corpus, seed=0)
    assert plan.additional_copies == {-1: 0, 0: 0, 1: 0}
    assert all(not v for v in plan.sources.values())


def test_plan_single_source():
    corpus = _labeled({-1: 3, 0: 1, 1: 1})
    plan = plan_oversample(compute_stats(corpus), corpus, seed=9)
    assert plan.additional_copies == {-1: 0, 0: 2, 1: 2}
    assert plan.sources[0] == [("c0_00", 0), ("c0_00", 1)]


@settings(max_examples=50, deadline=None)
@given(
    counts=st.fixed_dictionaries({-1: st.integers(1, 20), 0: st.integers(1, 20), 1: st.integers(1, 20)}),
    seed=st.integers(0, 2**32),
)
def test_plan_even_spread_same_class(counts, seed):
    corpus = _labeled(counts)
    plan = plan_oversample(compute_stats(corpus), corpus, seed)
    label_of = {s.id: s.label for s in corpus}
    for cls, assigned in plan.sources.items():
        assert all(label_of[src] == cls for src, _ in assigned)
        per_source = Counter(src for src, _ in assigned)
        full = [per_source.get(s.id, 0) for s in corpus if s.label == cls]
        assert max(full) - min(full) <= 1
        assert counts[cls] + len(assigned) == max(counts.values())


def test_plan_errors_on_empty_class():
    corpus = _labeled({-1: 3, 0: 2})
    stats = compute_stats(corpus)
    stats = type(stats)(stats.max_height, stats.max_width, {-1: 3, 0: 2, 1: 0}, 5)
    with pytest.raises(AugmentError, match="class 1"):
        plan_oversample(stats, corpus, 0)


def test_balance_oxml(oxml_corpus):
    out = balance_corpus(oxml_corpus, JitterSpec(), seed=1)
    assert len(out) == 108
    assert Counter(s.label for s in out) == {-1: 36, 0: 36, 1: 36}
    assert out[:62] == list(oxml_corpus)
    assert len({s.id for s in out}) == 108


def test_balance_noop_and_deterministic():
    corpus = _labeled({-1: 4, 0: 4, 1: 4})
    assert balance_corpus(corpus, JitterSpec(), 0) == corpus
    skewed = _labeled({-1: 6, 0: 2, 1: 3})
    a = balance_corpus(skewed, JitterSpec(), 4)
    b = balance_corpus(skewed, JitterSpec(), 4)
    assert a == b


def test_balance_copies_independent_of_generation_order():
    corpus = _labeled({-1: 6, 0: 2, 1: 3})
    out = balance_corpus(corpus, JitterSpec(seed=2), 4)
    by_id = {s.id: s for s in corpus}
    for s in out[len(corpus):]:
        src, _, k = s.id.rpartition("__jit")
        again = apply_jitter(by_id[src], JitterSpec(seed=2), copy_rng(4, src, int(k), 2), int(k))
        assert again == s


@settings(max_examples=25, deadline=None)
@given(
    counts=st.fixed_dictionaries({-1: st.integers(1, 12), 0: st.integers(1, 12), 1: st.integers(1, 12)}),
    seed=st.integers(0, 1000),
)
def test_balance_histogram_uniform(counts, seed):
    out = balance_corpus(_labeled(counts), JitterSpec(), seed)
    assert set(Counter(s.label for s in out).values()) == {max(counts.values())}


def test_manifest_round_trip(tmp_path, oxml_corpus):
    out = balance_corpus(oxml_corpus, JitterSpec(), 0)
    rows = manifest_rows(out, [s.id for s in oxml_corpus])
    path = write_manifest(rows, tmp_path / "m.csv")
    assert path.read_text().splitlines()[0] == "id,source_id,class,transform"
    assert read_manifest(path) == rows
    assert sum(r.transform != "original" for r in rows) == 46
