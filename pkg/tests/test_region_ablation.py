import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bfda.datamodel import BBox, GTAnnotation, scale_box
from bfda.region_ablation import (
    FOREGROUND,
    INNER_BG,
    OUTER_BG,
    DEFAULT_BANDS,
    FillPolicy,
    MaskConfigError,
    RegionSelector,
    apply_fill,
    band_weight_map,
    build_region_mask,
)

from conftest import pixel_in_box, scan_mask


def ann(*xywh):
    return GTAnnotation(BBox(*xywh))


def band_oracle(h, w, boxes, lo, hi):
    """Pixel scan: inside some hi-scaled box, outside every lo-scaled box and every original box."""
    big = [scale_box(b, hi) for b in boxes]
    small = [scale_box(b, lo) for b in boxes]

    def pred(i, j):
        return (any(pixel_in_box(b, i, j) for b in big)
                and not any(pixel_in_box(b, i, j) for b in small)
                and not any(pixel_in_box(b, i, j) for b in boxes))

    return scan_mask(h, w, pred)


def test_selector_validation():
    with pytest.raises(MaskConfigError):
        RegionSelector.band(0.5, 2.0)
    with pytest.raises(MaskConfigError):
        RegionSelector.band(2.0, 2.0)
    with pytest.raises(MaskConfigError):
        RegionSelector("everything")
    assert RegionSelector.band(1.5, 2.5).name == "no_1.5_2.5"


def test_outer_background_without_annotations_is_full():
    assert build_region_mask((7, 9), [], RegionSelector(OUTER_BG)).all()


def test_band_area_single_box():
    m = build_region_mask((100, 100), [ann(10, 10, 4, 4)], RegionSelector.band(1.0, 2.0))
    assert m.sum() == 48
    assert np.array_equal(m, band_oracle(100, 100, [BBox(10, 10, 4, 4)], 1.0, 2.0))


def test_pixel_precise_needs_masks():
    with pytest.raises(MaskConfigError):
        build_region_mask((10, 10), [ann(1, 1, 4, 4)], RegionSelector(FOREGROUND))
    degraded = build_region_mask((10, 10), [ann(1, 1, 4, 4)], RegionSelector(FOREGROUND), pixel_precise=False)
    assert degraded.sum() == 16
    assert not build_region_mask((10, 10), [ann(1, 1, 4, 4)], RegionSelector(INNER_BG), pixel_precise=False).any()


def test_mask_shape_mismatch_rejected():
    with pytest.raises(MaskConfigError):
        build_region_mask((10, 10), [ann(1, 1, 4, 4)], RegionSelector(FOREGROUND), [np.ones((5, 5), bool)])


layouts = st.lists(
    st.tuples(st.integers(-4, 30), st.integers(-4, 30), st.integers(1, 12), st.integers(1, 14)),
    min_size=0, max_size=4,
)


@settings(max_examples=30, deadline=None)
@given(layouts, st.integers(0, 10_000))
def test_region_partition(layout, seed):
    rng = np.random.default_rng(seed)
    anns = [ann(*b) for b in layout]
    masks = [rng.random((24, 28)) < 0.5 for _ in anns]
    parts = [build_region_mask((24, 28), anns, RegionSelector(k), masks) for k in (FOREGROUND, INNER_BG, OUTER_BG)]
    assert np.array_equal(sum(p.astype(int) for p in parts), np.ones((24, 28), int))


@settings(max_examples=20, deadline=None)
@given(layouts, st.sampled_from([(1.0, 1.5, 2.0), (1.0, 2.0, 3.0), (1.5, 2.0, 2.5), (1.2, 2.2, 5.0)]))
def test_band_additivity_and_oracle(layout, bands):
    lo, mid, hi = bands
    boxes = [BBox(*b) for b in layout]
    anns = [GTAnnotation(b) for b in boxes]
    whole = build_region_mask((26, 30), anns, RegionSelector.band(lo, hi))
    a = build_region_mask((26, 30), anns, RegionSelector.band(lo, mid))
    b = build_region_mask((26, 30), anns, RegionSelector.band(mid, hi))
    assert not (a & b).any()
    assert np.array_equal(a | b, whole)
    assert np.array_equal(whole, band_oracle(26, 30, boxes, lo, hi))


def test_band_never_covers_original_boxes():
    anns = [ann(5, 5, 6, 10), ann(9, 8, 6, 10)]
    m = build_region_mask((40, 40), anns, RegionSelector.band(1.0, 3.0))
    for a in anns:
        assert not m[int(a.box.y):int(a.box.y2), int(a.box.x):int(a.box.x2)].any()


def test_fill_policies():
    rng = np.random.default_rng(0)
    img = rng.random((6, 8, 3))
    empty = np.zeros((6, 8), bool)
    assert np.array_equal(apply_fill(img, empty, FillPolicy("black")), img)
    full = ~empty
    assert not apply_fill(img, full, FillPolicy("black")).any()
    assert (apply_fill(img, full, FillPolicy("white")) == 1.0).all()
    const = apply_fill(img, full, FillPolicy("constant", rgb=(0.1, 0.2, 0.3)))
    assert np.allclose(const, [0.1, 0.2, 0.3])
    r1 = apply_fill(img, full, FillPolicy("random", seed=3), image_index=4)
    r2 = apply_fill(img, full, FillPolicy("random", seed=3), image_index=4)
    r3 = apply_fill(img, full, FillPolicy("random", seed=3), image_index=5)
    assert np.array_equal(r1, r2) and not np.array_equal(r1, r3)
    with pytest.raises(ValueError):
        apply_fill(img, np.zeros((3, 3), bool), FillPolicy("black"))


def test_average_fill_uses_prefill_mean():
    img = np.zeros((4, 4, 3))
    img[:2] = 0.8  # mean 0.4
    mask = np.zeros((4, 4), bool)
    mask[2:] = True
    out = apply_fill(img, mask, FillPolicy("average"))
    assert np.allclose(out[2:], 0.4)
    assert np.array_equal(out[:2], img[:2])
    assert (img[2:] == 0).all()  # input untouched


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_fill_leaves_unselected_pixels_bitwise(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((9, 7, 3)).astype(np.float32)
    mask = rng.random((9, 7)) < 0.3
    for kind in ("black", "white", "average", "random"):
        out = apply_fill(img, mask, FillPolicy(kind, seed))
        assert np.array_equal(out[~mask], img[~mask])


def test_weight_map_defaults():
    assert (band_weight_map((10, 12), []) == 1.0).all()
    assert [b[2] for b in DEFAULT_BANDS] == [2.0, 1.8, 1.6, 1.4, 1.2]
    assert [b[:2] for b in DEFAULT_BANDS] == [(1.0, 1.5), (1.5, 2.0), (2.0, 2.5), (2.5, 3.0), (3.0, 5.0)]
    with pytest.raises(MaskConfigError):
        band_weight_map((10, 10), [BBox(1, 1, 2, 2)], [(1.0, 2.0, 2.0), (1.5, 3.0, 1.5)])


def test_weight_map_rings_against_scan():
    box = BBox(45, 40, 10, 20)
    wm = band_weight_map((100, 100), [box])
    expected = np.ones((100, 100))
    for lo, hi, wt in DEFAULT_BANDS:
        expected[band_oracle(100, 100, [box], lo, hi)] = wt
    assert np.array_equal(wm, expected)
    # ring areas by hand: (s*10)*(s*20) scaled rectangles, differences between consecutive scales
    for (lo, hi, wt) in DEFAULT_BANDS[:4]:
        assert (wm == wt).sum() == pytest.approx(200 * (hi * hi - lo * lo), abs=2 * 20 * hi + 2)


@settings(max_examples=20, deadline=None)
@given(layouts)
def test_weight_map_values_from_configured_set(layout):
    wm = band_weight_map((30, 30), [BBox(*b) for b in layout])
    assert set(np.unique(wm)) <= {1.0, 2.0, 1.8, 1.6, 1.4, 1.2}
    for b in layout:
        box = BBox(*b)
        inside = build_region_mask((30, 30), [GTAnnotation(box)], RegionSelector(FOREGROUND), pixel_precise=False)
        assert (wm[inside] == 1.0).all()
