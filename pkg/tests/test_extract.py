import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import flood_fill_components, merge_to_fixpoint, otsu_sweep, union_find_groups
from signet import synth
from signet.config import PipelineConfig
from signet.core import PageImage
from signet.extract import (
    Region, binarize, connected_components, extract_candidates, heuristic_filter, merge_regions,
    remove_edges,
)


def page(arr):
    return PageImage("doc", 0, np.asarray(arr, dtype=np.float32))


def block(x0, y0, w, h):
    return Region.from_pixels([(x, y) for x in range(x0, x0 + w) for y in range(y0, y0 + h)])


def test_white_page_binarizes_empty():
    assert not binarize(page(np.ones((40, 40)))).pixels.any()


def test_half_black_page():
    arr = np.ones((20, 20))
    arr[:, :10] = 0.0
    fg = binarize(page(arr)).pixels
    assert fg[:, :10].all() and not fg[:, 10:].any()


def test_bimodal_page_matches_sweep_oracle():
    rng = np.random.default_rng(3)
    arr = np.full(1000, 0.9)
    arr[rng.choice(1000, 100, replace=False)] = 0.2
    arr = arr.reshape(25, 40)
    fg = binarize(page(arr)).pixels
    assert np.array_equal(fg, arr == 0.2)
    assert np.array_equal(fg, otsu_sweep(arr))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (12, 12), elements=st.sampled_from([0.0, 0.1, 0.3, 0.5, 0.7, 0.85, 1.0])))
@example(np.where(np.arange(144).reshape(12, 12) == 2, 0.0,
                  np.where(np.arange(144).reshape(12, 12) == 4, 0.7,
                           np.where(np.isin(np.arange(144).reshape(12, 12), [0, 1, 3]), 0.3, 0.1))))
def test_binarize_matches_sweep_oracle(arr):
    pg = page(arr)
    fg = binarize(pg).pixels
    # the oracle sees the stored (float32) pixels, as the binarizer does
    expect = otsu_sweep(pg.pixels)
    if expect is None:
        assert not fg.any()
    else:
        assert np.array_equal(fg, expect)


def test_empty_image_has_no_components():
    assert connected_components(np.zeros((10, 10), dtype=bool)) == []


def test_diagonal_pixels_join():
    m = np.zeros((4, 4), dtype=bool)
    m[1, 1] = m[2, 2] = True
    (r,) = connected_components(m)
    assert r.area == 2


def test_two_separated_blocks():
    m = np.zeros((20, 20), dtype=bool)
    m[5:8, 2:5] = True
    m[5:8, 10:13] = True
    regions = connected_components(m)
    assert [r.area for r in regions] == [9, 9]
    assert {r.pixel_set for r in regions} == set(flood_fill_components(m))


@settings(max_examples=80, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 24), st.integers(1, 24))))
def test_components_match_flood_fill(mask):
    regions = connected_components(mask)
    got = [r.pixel_set for r in regions]
    assert sorted(got, key=sorted) == sorted(flood_fill_components(mask), key=sorted)
    keys = [(r.bbox[1], r.bbox[0]) for r in regions]
    assert keys == sorted(keys)


def test_region_bbox_is_tight():
    r = Region.from_pixels([(3, 4), (7, 2), (5, 9)])
    assert r.bbox == (3, 2, 7, 9) and r.area == 3


def test_full_width_rule_removed():
    dims = (200, 300)
    rule = block(10, 100, 280, 2)
    assert remove_edges([rule], dims) == []


def test_central_blob_kept():
    blob = block(120, 80, 50, 40)
    assert remove_edges([blob], (200, 300)) == [blob]


def test_border_touching_blob_removed():
    rng = np.random.default_rng(0)
    pixels = {(0, int(y)) for y in rng.integers(50, 60, 5)} | {(x, 55) for x in range(0, 20)}
    r = Region.from_pixels(pixels)
    assert r.bbox[0] == 0
    assert remove_edges([r], (200, 300)) == []


def test_single_region_merge_unchanged():
    r = block(5, 5, 3, 3)
    (m,) = merge_regions([r], 0.015, 100)
    assert m.pixel_set == r.pixel_set


def test_adjacent_boxes_merge_to_envelope():
    a, b = block(0, 0, 3, 3), block(3, 1, 4, 4)
    (m,) = merge_regions([a, b], 0.01, 100)
    assert m.bbox == (0, 0, 6, 4)
    assert m.pixel_set == a.pixel_set | b.pixel_set


@pytest.mark.parametrize("gap,expect", [(9, 1), (11, 3)])
def test_collinear_transitivity(gap, expect):
    # limit = 0.1 * 100 = 10 px
    regions = [block(10 + i * (3 + gap), 50, 3, 3) for i in range(3)]
    merged = merge_regions(regions, 0.1, 100)
    assert len(merged) == expect
    boxes = [r.bbox for r in regions]
    assert len(union_find_groups(boxes, 10)) == expect


boxes = st.lists(st.tuples(st.integers(0, 80), st.integers(0, 80), st.integers(1, 8), st.integers(1, 8)),
                 min_size=1, max_size=12)


@settings(max_examples=80, deadline=None)
@given(boxes, st.integers(1, 20), st.randoms(use_true_random=False))
def test_merge_matches_union_find(layout, limit_px, rnd):
    regions = [block(*s) for s in layout]
    merged = merge_regions(regions, limit_px / 100, 100)
    expect = {frozenset().union(*(regions[i].pixel_set for i in g))
              for g in merge_to_fixpoint([r.bbox for r in regions], limit_px)}
    assert {m.pixel_set for m in merged} == expect
    shuffled = regions[:]
    rnd.shuffle(shuffled)
    assert [m.pixel_set for m in merge_regions(shuffled, limit_px / 100, 100)] == [m.pixel_set for m in merged]
    again = merge_regions(merged, limit_px / 100, 100)
    assert [m.pixel_set for m in again] == [m.pixel_set for m in merged]


def test_dense_rectangle_rejected():
    cfg = PipelineConfig()
    arr = np.ones((400, 400))
    arr[100:140, 100:200] = 0.0
    regions = [block(100, 100, 100, 40)]
    assert heuristic_filter(regions, cfg, page(arr)) == []


def test_thin_line_rejected():
    cfg = PipelineConfig()
    assert heuristic_filter([block(50, 200, 300, 1)], cfg, page(np.ones((400, 400)))) == []


def test_sparse_scrawl_retained():
    cfg = PipelineConfig()
    H, W = 1000, 1000
    # bbox 300 x 100 = 3% of the page at aspect 3; 3600 of 30000 pixels inked = density 0.12
    w, h = 300, 100
    rng = np.random.default_rng(1)
    inside = rng.choice(w * h, 3600, replace=False)
    ys, xs = np.divmod(inside, w)
    ys[0], xs[0], ys[1], xs[1] = 0, 0, h - 1, w - 1
    pix = {(int(x) + 200, int(y) + 300) for x, y in zip(xs, ys)}
    r = Region.from_pixels(pix)
    assert (r.width, r.height) == (300, 100)
    assert r.density == pytest.approx(0.12)
    assert r.aspect == pytest.approx(3.0)
    arr = np.ones((H, W))
    arr[r.ys, r.xs] = 0.0
    (c,) = heuristic_filter([r], cfg, page(arr))
    assert c.bbox == r.bbox and c.density == pytest.approx(0.12)
    assert c.crop.provenance.bbox == r.bbox


def test_scrawl_at_one_and_a_half_percent_area():
    cfg = PipelineConfig()
    # 1.5% of a 1000 x 1000 page = 15000 px^2, aspect 3 -> ~212 x 71
    w, h = 212, 71
    rng = np.random.default_rng(2)
    n = round(0.12 * w * h)
    inside = rng.choice(w * h, n, replace=False)
    ys, xs = np.divmod(inside, w)
    ys[0], xs[0], ys[1], xs[1] = 0, 0, h - 1, w - 1
    r = Region.from_pixels({(int(x) + 400, int(y) + 400) for x, y in zip(xs, ys)})
    assert abs(r.density - 0.12) < 1e-3
    assert abs(r.aspect - 3.0) < 0.02
    assert abs(r.width * r.height / 1e6 - 0.015) < 1e-4
    arr = np.ones((1000, 1000))
    arr[r.ys, r.xs] = 0.0
    assert len(heuristic_filter([r], cfg, page(arr))) == 1


def test_filter_output_subset_of_input():
    cfg = PipelineConfig()
    arr = np.ones((400, 400))
    regions = [block(50, 50, 100, 40), block(50, 200, 300, 1), block(200, 300, 20, 20)]
    out = heuristic_filter(regions, cfg, page(arr))
    assert {c.bbox for c in out} <= {r.bbox for r in regions}


def test_extraction_is_deterministic_and_finds_signatures():
    doc = synth.render_document([0, 1], rng=np.random.default_rng(5))
    p = PageImage("d", 0, doc.pages[0], doc.dpi)
    first = extract_candidates(p)
    second = extract_candidates(PageImage("d", 0, doc.pages[0].copy(), doc.dpi))
    assert [c.bbox for c in first] == [c.bbox for c in second]
    assert all(np.array_equal(a.crop.pixels, b.crop.pixels) for a, b in zip(first, second))
    from signet.evaluate import iou
    for _, box, _ in doc.signatures:
        assert any(iou(c.bbox, box) >= 0.5 for c in first)
