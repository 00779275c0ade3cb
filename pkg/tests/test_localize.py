import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cardamage.data import CLASS_NAMES, NO_DAMAGE
from cardamage.localize import (DAMAGE_CLASSES, PALETTE, Heatmap, LocalizeConfig, MaskOracle, Region,
                                grid_centers, iou, render_overlay, sliding_window_map, threshold_regions,
                                top_region)
from cardamage.synth import make_image
from cardamage.tensor import Prng, bilinear_resize

K = len(CLASS_NAMES)
SCRATCH = CLASS_NAMES.index("scratch")
CRUSH = CLASS_NAMES.index("crush")


def constant_no_damage(crops):
    out = np.zeros((len(crops), K))
    out[:, NO_DAMAGE] = 1.0
    return out


def mean_brightness(label):
    """Probability of ``label`` equals the crop's mean of channel 0."""
    def fn(crops):
        m = crops[..., 0].reshape(len(crops), -1).mean(axis=1)
        out = np.zeros((len(crops), K))
        out[:, label] = m
        out[:, NO_DAMAGE] = 1.0 - m
        return out
    return fn


def heatmap_from_grid(grid, label=SCRATCH, stride=4, window=4):
    """Heatmap with prescribed ``label`` probabilities on a ``rows x cols`` grid."""
    grid = np.asarray(grid, dtype=np.float64)
    rows, cols = grid.shape
    probs = np.zeros((K,) + grid.shape)
    probs[label] = grid
    probs[NO_DAMAGE] = 1.0 - grid
    shape = (rows * stride, cols * stride)
    return Heatmap(probs, grid_centers(shape[0], stride), grid_centers(shape[1], stride), shape, window, stride, 8)


# --- heat map --------------------------------------------------------------------

def test_constant_no_damage_gives_zero_damage_maps():
    img = Prng(0).random((40, 40, 3))
    hm = sliding_window_map(img, constant_no_damage, LocalizeConfig(window=16, resize_to=8, stride=8))
    assert hm.grid_shape == (5, 5)
    assert np.all(hm.probs[list(DAMAGE_CLASSES)] == 0.0)
    assert threshold_regions(hm, LocalizeConfig(window=16, resize_to=8, stride=8)) == []


def test_stride_equal_to_image_gives_single_cell():
    img = Prng(1).random((24, 24, 3))
    hm = sliding_window_map(img, mean_brightness(SCRATCH), LocalizeConfig(window=24, resize_to=6, stride=24))
    assert hm.grid_shape == (1, 1)
    expected = bilinear_resize(img[None], 6, 6)[0, ..., 0].mean()
    assert hm.probs[SCRATCH, 0, 0] == pytest.approx(expected, abs=1e-12)


def test_grid_centers_are_tile_middles():
    np.testing.assert_array_equal(grid_centers(10, 4), [1, 5, 8])
    np.testing.assert_array_equal(grid_centers(6, 1), np.arange(6))


@pytest.mark.parametrize("seed", [5, 6, 7])
def test_scratch_coverage_peak_inside_box(seed):
    # score = share of the crop covered by the mask, so the peak sits on the damage
    it = make_image(SCRATCH, 96, seed=seed, source_id="loc_scratch")
    mask = it.mask.astype(np.float64)
    cfg = LocalizeConfig(window=32, resize_to=16, stride=4)
    hm = sliding_window_map(mask[:, :, None], mean_brightness(SCRATCH), cfg)
    i, j = np.unravel_index(np.argmax(hm.probs[SCRATCH]), hm.grid_shape)
    x, y, w, h = it.image.bbox
    assert x <= hm.centers_x[j] < x + w and y <= hm.centers_y[i] < y + h


def test_scratch_with_oracle_region_overlaps_box():
    it = make_image(SCRATCH, 96, seed=5, source_id="loc_scratch")
    mask = it.mask.astype(np.float64)
    cfg = LocalizeConfig(window=32, resize_to=16, stride=4)
    hm = sliding_window_map(mask[:, :, None], MaskOracle(mask.sum(), SCRATCH, cfg.window), cfg)
    assert hm.probs[SCRATCH].max() == 1.0
    best = top_region(threshold_regions(hm, cfg))
    assert best.label == SCRATCH and iou(best.bbox, it.image.bbox) > 0.0


def test_spot_check_cells_against_direct_calls():
    img = Prng(2).random((50, 44, 3))
    cfg = LocalizeConfig(window=20, resize_to=10, stride=6, batch_size=7)
    clf = mean_brightness(CRUSH)
    hm = sliding_window_map(img, clf, cfg)
    rng = Prng(3)
    for _ in range(10):
        i = int(rng.integers(hm.grid_shape[0]))
        j = int(rng.integers(hm.grid_shape[1]))
        x, y, w, h = hm.crop(i, j)
        assert (w, h) == (20, 20) and 0 <= x <= 44 - 20 and 0 <= y <= 50 - 20
        direct = clf(bilinear_resize(img[None, y : y + h, x : x + w], 10, 10))[0]
        np.testing.assert_allclose(hm.probs[:, i, j], direct, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_stride_one_agrees_with_stride_k_at_shared_points(k, seed):
    img = Prng(seed).random((21, 17, 1))
    clf = mean_brightness(SCRATCH)
    fine = sliding_window_map(img, clf, LocalizeConfig(window=9, resize_to=9, stride=1))
    coarse = sliding_window_map(img, clf, LocalizeConfig(window=9, resize_to=9, stride=k))
    for i, cy in enumerate(coarse.centers_y):
        for j, cx in enumerate(coarse.centers_x):
            if i * k + k - 1 < 21 and j * k + k - 1 < 17:
                assert (cy, cx) == (i * k + (k - 1) // 2, j * k + (k - 1) // 2)
            np.testing.assert_allclose(coarse.probs[:, i, j], fine.probs[:, cy, cx], atol=1e-12)


def test_window_larger_than_image_rejected():
    with pytest.raises(ValueError, match="smaller than window"):
        sliding_window_map(np.zeros((8, 8, 3)), constant_no_damage, LocalizeConfig(window=9))


def test_config_validation():
    for bad in (dict(window=0), dict(stride=0), dict(threshold=0.0), dict(threshold=1.5), dict(footprint="x")):
        with pytest.raises(ValueError):
            LocalizeConfig(**bad)


def test_heatmap_json_shape():
    hm = heatmap_from_grid([[0.1, 0.95]])
    d = hm.to_dict()
    assert d["grid"] == {"rows": 1, "cols": 2, "centers_y": [1], "centers_x": [1, 5]}
    assert d["classes"]["scratch"] == [[0.1, 0.95]]


# --- regions -------------------------------------------------------------------

def test_threshold_above_max_gives_no_regions():
    hm = heatmap_from_grid([[0.5, 0.8], [0.7, 0.2]])
    assert threshold_regions(hm, LocalizeConfig(threshold=0.81)) == []


def test_single_cell_region_cell_and_window_footprints():
    grid = np.zeros((4, 4))
    grid[1, 2] = 0.95
    hm = heatmap_from_grid(grid, stride=4, window=8)
    (cell,) = threshold_regions(hm, LocalizeConfig(footprint="cell"))
    assert cell.bbox == hm.tile(1, 2) == (8, 4, 4, 4)
    assert (cell.label, cell.score, cell.cells) == (SCRATCH, 0.95, 1)
    (win,) = threshold_regions(hm, LocalizeConfig(footprint="window"))
    # tile (1, 2) spans rows 4..7 and cols 8..11; its center pixel (5, 9) minus half the window
    assert win.bbox == hm.crop(1, 2) == (5, 1, 8, 8)


def test_two_blobs_give_two_regions():
    grid = np.zeros((5, 6))
    grid[0:2, 0:2] = 0.92
    grid[3:5, 4:6] = 0.97
    grid[4, 5] = 0.99
    regions = threshold_regions(heatmap_from_grid(grid), LocalizeConfig())
    assert sorted(r.bbox for r in regions) == [(0, 0, 8, 8), (16, 12, 8, 8)]
    assert top_region(regions).bbox == (16, 12, 8, 8)
    assert top_region(regions).score == 0.99
    # plain Python scalars, so regions serialize directly
    assert json.loads(json.dumps([r.to_dict() for r in regions]))[0]["class"] == "scratch"


def test_diagonal_cells_are_separate_components():
    grid = np.array([[0.95, 0.0], [0.0, 0.95]])
    assert len(threshold_regions(heatmap_from_grid(grid), LocalizeConfig())) == 2


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.9), st.floats(0.0, 0.09))
def test_raising_threshold_never_adds_cells(seed, lo, step):
    hm = heatmap_from_grid(Prng(seed).random((6, 7)))
    def covered(t):
        return sum(r.cells for r in threshold_regions(hm, LocalizeConfig(threshold=t)))
    assert covered(lo + step) <= covered(lo)


def test_top_region_tie_breaks():
    a = Region(0, 0, 4, 4, SCRATCH, 0.95, cells=1)
    b = Region(8, 0, 4, 4, CRUSH, 0.95, cells=3)
    c = Region(0, 8, 4, 4, CRUSH, 0.95, cells=3)
    assert top_region([a, b, c]) is b
    assert top_region([]) is None


def test_iou_cases():
    assert iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0
    assert iou((0, 0, 4, 4), (4, 0, 4, 4)) == 0.0
    assert iou((0, 0, 4, 4), (2, 0, 4, 4)) == pytest.approx(8 / 24)
    assert iou((0, 0, 0, 0), (0, 0, 0, 0)) == 0.0


# --- overlay -------------------------------------------------------------------

def test_overlay_without_regions_is_identity():
    img = Prng(4).random((12, 10, 3))
    out = render_overlay(img, [])
    assert out.tobytes() == img.tobytes() and out is not img


def test_overlay_single_region_changes_only_border():
    img = np.full((12, 10, 3), 0.5)
    r = Region(2, 3, 5, 4, SCRATCH, 0.95)
    out = render_overlay(img, [r])
    border = np.zeros((12, 10), dtype=bool)
    border[3:7, 2:7] = True
    border[4:6, 3:6] = False
    changed = np.any(out != img, axis=2)
    np.testing.assert_array_equal(changed, border)
    assert np.all(out[border] == PALETTE[SCRATCH])


def test_overlay_overlapping_classes_keep_both_borders():
    img = np.zeros((16, 16, 3))
    a = Region(1, 1, 8, 8, CRUSH, 0.95)
    b = Region(5, 5, 8, 8, SCRATCH, 0.95)
    out = render_overlay(img, [a, b])
    # a's top edge and b's bottom edge are disjoint from the other box's outline
    assert np.all(out[1, 1:9] == PALETTE[CRUSH])
    assert np.all(out[12, 5:13] == PALETTE[SCRATCH])
    # where the outlines cross, the later region wins
    assert tuple(out[8, 5]) == PALETTE[SCRATCH]


def test_overlay_gray_input_and_bounds():
    out = render_overlay(np.zeros((6, 6)), [Region(0, 0, 6, 6, CRUSH, 1.0)])
    assert out.shape == (6, 6, 3)
    with pytest.raises(ValueError, match="outside"):
        render_overlay(np.zeros((6, 6)), [Region(2, 2, 6, 6, CRUSH, 1.0)])


def test_mask_oracle_coverage_rule():
    oracle = MaskOracle(mask_area=16.0, label=CRUSH, window=8)
    crops = np.zeros((2, 4, 4, 1))
    crops[0, :2, :2] = 1.0      # 4/16 of the resized crop = 16 pixels of the window: full mask
    crops[1, 0, 0] = 0.5        # 1/32 of the window: 2 of 16 mask pixels
    p = oracle(crops)
    assert p[0, CRUSH] == 1.0 and p[1, NO_DAMAGE] == 1.0
