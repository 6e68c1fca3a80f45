import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from asiftmerge.errors import ImageTooSmallError, InvariantError, NoObjectSeedError
from asiftmerge.segmerge import (MergeParams, Metric, RegionLabel, Segmentation, color_bins,
                                 extract_boundary, format_contours, histogram_counts,
                                 initial_segment, merge_regions, region_histogram, seed_labels,
                                 similarity)
from merge_oracle import oracle_mask, random_instance


def _seg(labels):
    labels = np.asarray(labels, dtype=np.int64)
    return Segmentation(labels, int(labels.max()) + 1)


def _random_hist(rng, k=512):
    h = rng.random(k) * (rng.random(k) < 0.3)
    h[rng.integers(0, k)] += 0.1
    return h / h.sum()


# -- initial segmentation ----------------------------------------------------

def test_constant_image_one_region():
    seg = initial_segment(np.full((20, 24, 3), 77, np.uint8))
    assert seg.region_count == 1 and np.all(seg.labels == 0)


def test_red_blue_halves():
    img = np.zeros((20, 30, 3), np.uint8)
    img[:, :15] = (255, 0, 0)
    img[:, 15:] = (0, 0, 255)
    seg = initial_segment(img)
    assert seg.region_count == 2
    assert np.all(seg.labels[:, :15] == 0) and np.all(seg.labels[:, 15:] == 1)


def test_four_quadrants():
    img = np.zeros((32, 32, 3), np.uint8)
    img[:16, :16] = (10, 200, 30)
    img[:16, 16:] = (200, 10, 30)
    img[16:, :16] = (30, 30, 200)
    img[16:, 16:] = (250, 250, 250)
    seg = initial_segment(img)
    assert seg.region_count == 4
    assert [seg.labels[0, 0], seg.labels[0, 31], seg.labels[31, 0], seg.labels[31, 31]] == [0, 1, 2, 3]


def test_segmentation_too_small():
    with pytest.raises(ImageTooSmallError):
        initial_segment(np.zeros((15, 40, 3), np.uint8))


def test_segmentation_invariants():
    rng = np.random.default_rng(4)
    img = np.clip(ndimage.gaussian_filter(rng.random((40, 48, 3)) * 255, (2, 2, 0)) * 3 - 250, 0, 255)
    seg = initial_segment(img.astype(np.uint8))
    n = seg.region_count
    assert sorted(np.unique(seg.labels)) == list(range(n))
    # raster numbering: first occurrences appear in increasing id order
    _, first = np.unique(seg.labels.ravel(), return_index=True)
    assert list(np.argsort(first)) == list(range(n))
    sizes = np.bincount(seg.labels.ravel())
    assert n == 1 or sizes.min() >= MergeParams().min_region_px
    for r in range(n):
        _, comps = ndimage.label(seg.labels == r)
        assert comps == 1


# -- histograms and distance -------------------------------------------------

def test_pure_red_histogram():
    img = np.zeros((4, 4, 3), np.uint8)
    img[...] = (255, 0, 0)
    h = region_histogram(_seg(np.zeros((4, 4))), 0, img)
    assert h[448] == 1.0 and h.sum() == 1.0


def test_black_white_histogram():
    img = np.zeros((2, 4, 3), np.uint8)
    img[:, 2:] = 255
    h = region_histogram(_seg(np.zeros((2, 4))), 0, img)
    assert h[0] == 0.5 and h[511] == 0.5 and np.count_nonzero(h) == 2


def test_bin_index_formula(rng):
    img = rng.integers(0, 256, (5, 5, 3))
    expected = (img[..., 0] // 32) * 64 + (img[..., 1] // 32) * 8 + img[..., 2] // 32
    assert np.array_equal(color_bins(img), expected)


def test_missing_region():
    with pytest.raises(KeyError):
        region_histogram(_seg(np.zeros((2, 2))), 3, np.zeros((2, 2, 3), np.uint8))


def test_similarity_examples():
    a = np.zeros(512)
    b = np.zeros(512)
    a[3] = b[9] = 1.0
    assert similarity(a, a) == 0
    assert similarity(a, b) == pytest.approx(math.sqrt(2))
    assert similarity(a, b, Metric.CITYBLOCK) == pytest.approx(2.0)


@given(st.integers(0, 2**32 - 1), st.sampled_from(list(Metric)))
@settings(max_examples=50, deadline=None)
def test_metric_axioms(seed, metric):
    rng = np.random.default_rng(seed)
    a, b, c = (_random_hist(rng) for _ in range(3))
    assert similarity(a, b, metric) >= 0
    assert similarity(a, a, metric) == 0
    assert similarity(a, b, metric) > 0
    assert similarity(a, b, metric) == pytest.approx(similarity(b, a, metric), abs=1e-12)
    assert similarity(a, c, metric) <= similarity(a, b, metric) + similarity(b, c, metric) + 1e-12


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_histogram_normalized(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, (6, 7))
    labels[0, :3] = [0, 1, 2]
    img = rng.integers(0, 256, (6, 7, 3), dtype=np.uint8)
    for r in range(3):
        assert region_histogram(_seg(labels), r, img).sum() == pytest.approx(1.0, abs=1e-9)


# -- seeding -----------------------------------------------------------------

def _grid3(cell=10):
    colors = [(i * 28, 255 - i * 28, (i * 91) % 256) for i in range(9)]
    img = np.zeros((3 * cell, 3 * cell, 3), np.uint8)
    labels = np.zeros((3 * cell, 3 * cell), np.int64)
    for i in range(3):
        for j in range(3):
            img[i * cell:(i + 1) * cell, j * cell:(j + 1) * cell] = colors[i * 3 + j]
            labels[i * cell:(i + 1) * cell, j * cell:(j + 1) * cell] = i * 3 + j
    return img, labels


def test_seed_three_by_three_grid():
    img, labels = _grid3()
    g = seed_labels(_seg(labels), img, [(15.0, 15.0)])
    assert g.label[4] == RegionLabel.OBJECT
    assert [g.label[r] for r in range(9) if r != 4] == [RegionLabel.BACKGROUND] * 8
    assert g.adj[4] == {1, 3, 5, 7} and g.adj[0] == {1, 3}


def test_seed_requires_object():
    img, labels = _grid3()
    with pytest.raises(NoObjectSeedError):
        seed_labels(_seg(labels), img, [])


def test_keypoint_beats_border_contact():
    img, labels = _grid3()
    g = seed_labels(_seg(labels), img, [(2.0, 2.0)])
    assert g.label[0] == RegionLabel.OBJECT and g.label[4] == RegionLabel.NONE


def test_min_seed_keypoints():
    img, labels = _grid3()
    with pytest.raises(NoObjectSeedError):
        seed_labels(_seg(labels), img, [(15.0, 15.0)], MergeParams(min_seed_keypoints=2))
    g = seed_labels(_seg(labels), img, [(15.0, 15.0), (14.0, 16.0)], MergeParams(min_seed_keypoints=2))
    assert g.label[4] == RegionLabel.OBJECT


def test_graph_has_no_self_edges_and_is_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(20):
        regions, img, pts = random_instance(rng)
        try:
            g = seed_labels(_seg(regions), img, pts)
        except NoObjectSeedError:
            continue
        for a, nb in g.adj.items():
            assert a not in nb
            assert all(a in g.adj[b] for b in nb)


# -- merging -----------------------------------------------------------------

def test_three_strips_middle_joins_background():
    # left: background c1; middle: unlabeled c1; right: object c2
    img = np.zeros((10, 30, 3), np.uint8)
    img[:, :20] = (20, 200, 20)
    img[:, 20:] = (200, 20, 200)
    labels = np.zeros((10, 30), np.int64)
    labels[:, 10:20] = 1
    labels[:, 20:] = 2
    g = seed_labels(_seg(labels), img, [(25.0, 5.0)])
    # a full-height strip touches the frame; unlabel the middle one by hand
    g.label[1] = RegionLabel.NONE
    mask = merge_regions(g)
    assert g.label == {0: RegionLabel.BACKGROUND, 2: RegionLabel.OBJECT}
    assert np.array_equal(mask, labels == 2)


def test_single_object_region_covers_everything():
    img = np.full((16, 16, 3), 40, np.uint8)
    g = seed_labels(_seg(np.zeros((16, 16))), img, [(3.0, 3.0)])
    assert merge_regions(g).all()


def test_illegal_merges_raise():
    img, labels = _grid3()
    g = seed_labels(_seg(labels), img, [(15.0, 15.0)])
    with pytest.raises(InvariantError):
        g.merge(1, 4)   # object absorbed into background
    with pytest.raises(InvariantError):
        g.merge(0, 8)   # not adjacent


@pytest.mark.parametrize("metric", ["euclidean", "cityblock"])
def test_pipeline_matches_oracle(metric):
    rng = np.random.default_rng(99 if metric == "euclidean" else 100)
    for _ in range(40):
        regions, img, pts = random_instance(rng)
        expected = oracle_mask(regions, img, pts, metric=metric)
        try:
            g = seed_labels(_seg(regions), img, pts, MergeParams(metric=metric))
        except NoObjectSeedError:
            assert expected is None
            continue
        assert np.array_equal(merge_regions(g), expected)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_merge_bookkeeping(seed):
    rng = np.random.default_rng(seed)
    regions, img, pts = random_instance(rng)
    try:
        g = seed_labels(_seg(regions), img, pts)
    except NoObjectSeedError:
        return
    n0 = len(g)
    object_before = {r for r, lab in g.label.items() if lab == RegionLabel.OBJECT}
    mask = merge_regions(g)
    # termination bound and one node per merge event
    assert g.merge_events <= n0 - 1 and len(g) == n0 - g.merge_events
    # object seeds never turn into background
    assert object_before <= {r for r, lab in g.label.items() if lab == RegionLabel.OBJECT}
    assert set(g.label.values()) <= {RegionLabel.OBJECT, RegionLabel.BACKGROUND}
    background = g.mask(RegionLabel.BACKGROUND)
    assert np.all(mask ^ background)
    # merged histograms equal a recount from raw pixels
    cur = g.pixel_labels()
    recount = histogram_counts(cur, img, g.initial_count)
    for r in g.counts:
        assert np.array_equal(g.counts[r], recount[r])
        h = g.hist(r)
        assert h.sum() == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(h, recount[r] / recount[r].sum(), atol=1e-9)


def test_merging_is_deterministic():
    rng = np.random.default_rng(5)
    regions, img, pts = random_instance(rng)
    while True:
        try:
            masks = [merge_regions(seed_labels(_seg(regions), img, pts)) for _ in range(2)]
            break
        except NoObjectSeedError:
            regions, img, pts = random_instance(rng)
    assert masks[0].tobytes() == masks[1].tobytes()


# -- boundaries --------------------------------------------------------------

def test_empty_mask_no_contours():
    assert extract_boundary(np.zeros((5, 5), bool)) == []


def test_square_perimeter_clockwise():
    mask = np.zeros((8, 9), bool)
    mask[2:5, 4:7] = True
    (c,) = extract_boundary(mask)
    assert c == [(4, 2), (5, 2), (6, 2), (6, 3), (6, 4), (5, 4), (4, 4), (4, 3)]


def test_two_squares_two_contours():
    mask = np.zeros((10, 12), bool)
    mask[1:4, 1:4] = True
    mask[6:9, 7:10] = True
    cs = extract_boundary(mask)
    assert len(cs) == 2 and cs[0][0] == (1, 1) and cs[1][0] == (7, 6)


def test_single_pixel_and_line():
    mask = np.zeros((5, 5), bool)
    mask[2, 2] = True
    assert extract_boundary(mask) == [[(2, 2)]]
    mask[2, 1:4] = True
    assert extract_boundary(mask) == [[(1, 2), (2, 2), (3, 2)]]


def test_diagonal_pixels_are_separate_components():
    mask = np.zeros((4, 4), bool)
    mask[1, 1] = mask[2, 2] = True
    assert extract_boundary(mask) == [[(1, 1)], [(2, 2)]]


def _shoelace(c):
    return sum(x0 * y1 - x1 * y0 for (x0, y0), (x1, y1) in zip(c, c[1:] + c[:1])) / 2


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_contours_are_boundary_pixels_clockwise(seed):
    rng = np.random.default_rng(seed)
    mask = ndimage.binary_opening(rng.random((20, 20)) < 0.6, iterations=1)
    mask = ndimage.binary_fill_holes(mask)
    comps, n = ndimage.label(mask)
    contours = extract_boundary(mask)
    assert len(contours) == n
    inner = ndimage.binary_erosion(mask, border_value=0)
    edge = mask & ~inner
    for c in contours:
        assert len(set(c)) == len(c)
        xs, ys = zip(*c)
        assert np.all(edge[list(ys), list(xs)])
        lab = comps[c[0][1], c[0][0]]
        assert all(comps[y, x] == lab for x, y in c)
        if len(c) >= 3 and len({x for x in xs}) > 1 and len({y for y in ys}) > 1:
            # y points down, so clockwise on screen has positive shoelace area
            assert _shoelace(c) > 0
    # every edge pixel of a component is reached by its contour
    for c in contours:
        lab = comps[c[0][1], c[0][0]]
        assert set(zip(*np.nonzero(edge & (comps == lab)))) == {(y, x) for x, y in c}


def test_contour_text_format():
    assert format_contours([[(1, 2), (3, 4)], [(5, 6)]]) == "1 2,3 4\n5 6\n"
