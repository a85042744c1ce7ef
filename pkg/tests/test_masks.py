import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import random_bool_grid
from soba import (
    BitMask,
    Box,
    DataError,
    RleMask,
    SoftMask,
    box_iou,
    decode_rle,
    distance_transform,
    encode_rle,
    laplacian,
    mask_difference,
    mask_intersection,
    mask_iou,
    mask_to_box,
    mask_union,
    threshold_band,
    translate_mask,
)
from soba.masks import rle_from_json, rle_to_json


def bitmask(rows):
    return BitMask(np.array(rows, dtype=bool))


class TestRle:
    def test_single_pixel_2x2(self):
        m = bitmask([[1, 0], [0, 0]])
        assert encode_rle(m).counts == (0, 1, 3)

    def test_all_zero_3x3(self):
        assert encode_rle(BitMask.zeros(3, 3)).counts == (9,)

    def test_all_one_2x3(self):
        m = BitMask(np.ones((2, 3), dtype=bool))
        assert encode_rle(m).counts == (0, 6)

    def test_decode_single_pixel(self):
        m = decode_rle(RleMask(width=2, height=2, counts=(0, 1, 3)))
        assert m == bitmask([[1, 0], [0, 0]])

    def test_decode_empty(self):
        assert decode_rle(RleMask(width=2, height=2, counts=(4,))).is_empty()

    def test_decode_matches_per_pixel_reconstruction(self):
        counts = (0, 2, 2, 2)
        got = decode_rle(RleMask(width=3, height=2, counts=counts))
        expected = oracles.decode_rle_per_pixel(counts, width=3, height=2)
        assert np.array_equal(got.pixels, expected)

    def test_malformed_sum_rejected(self):
        with pytest.raises(DataError, match="malformed RLE"):
            RleMask(width=2, height=2, counts=(0, 1, 2))

    def test_zero_interior_run_rejected(self):
        with pytest.raises(DataError):
            RleMask(width=2, height=2, counts=(0, 1, 3, 0))

    def test_json_round_trip(self, rng):
        m = BitMask(random_bool_grid(rng, 7, 5))
        r = encode_rle(m)
        assert rle_from_json(rle_to_json(r)) == r

    def test_json_errors_name_the_field(self):
        with pytest.raises(DataError, match="instance 7"):
            rle_from_json({"counts": [4]}, what="instance 7")

    @given(
        st.integers(min_value=1, max_value=12),
        st.integers(min_value=1, max_value=12),
        st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=200, deadline=None)
    def test_round_trip_property(self, h, w, seed):
        grid = np.random.default_rng(seed).random((h, w)) < 0.5
        m = BitMask(grid)
        assert decode_rle(encode_rle(m)) == m


class TestMaskIou:
    def test_identical(self):
        m = bitmask([[1, 1], [0, 1]])
        assert mask_iou(m, m) == 1.0

    def test_disjoint(self):
        a = bitmask([[1, 0], [0, 0]])
        b = bitmask([[0, 0], [0, 1]])
        assert mask_iou(a, b) == 0.0

    def test_overlapping_rectangles(self):
        a = np.zeros((4, 6), dtype=bool)
        b = np.zeros((4, 6), dtype=bool)
        a[0:2, 0:4] = True  # 2x4 rectangle
        b[0:2, 2:6] = True  # 2x4 rectangle, overlap 2x2
        got = mask_iou(BitMask(a), BitMask(b))
        assert got == pytest.approx(4 / 12)
        assert got == pytest.approx(oracles.pixel_iou(a, b))

    def test_both_empty_is_zero(self):
        assert mask_iou(BitMask.zeros(3, 3), BitMask.zeros(3, 3)) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(DataError, match="dimensions differ"):
            mask_iou(BitMask.zeros(3, 3), BitMask.zeros(3, 4))

    def test_matches_dense_oracle_on_random_masks(self, rng):
        for _ in range(25):
            a = random_bool_grid(rng, 9, 7)
            b = random_bool_grid(rng, 9, 7)
            assert mask_iou(BitMask(a), BitMask(b)) == oracles.pixel_iou(a, b)

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_symmetry_and_self(self, seed):
        r = np.random.default_rng(seed)
        a = BitMask(r.random((6, 6)) < 0.5)
        b = BitMask(r.random((6, 6)) < 0.5)
        assert mask_iou(a, b) == mask_iou(b, a)
        if not a.is_empty():
            assert mask_iou(a, a) == 1.0

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_intersecting_with_a_never_lowers_iou(self, seed):
        r = np.random.default_rng(seed)
        a = BitMask(r.random((6, 6)) < 0.5)
        b = BitMask(r.random((6, 6)) < 0.5)
        assert mask_iou(a, mask_intersection(a, b)) >= mask_iou(a, b)


class TestBoxIou:
    def test_identical(self):
        b = Box(2, 3, 4, 5)
        assert box_iou(b, b) == 1.0

    def test_touching_edges(self):
        assert box_iou(Box(0, 0, 2, 2), Box(2, 0, 2, 2)) == 0.0

    def test_unit_offset_overlap(self):
        got = box_iou(Box(0, 0, 2, 2), Box(1, 0, 2, 2))
        assert got == pytest.approx(2 / 6)
        assert got == pytest.approx(oracles.rasterized_box_iou((0, 0, 2, 2), (1, 0, 2, 2)))

    def test_matches_rasterized_oracle(self, rng):
        for _ in range(25):
            a = tuple(int(v) for v in rng.integers(0, 8, size=2)) + tuple(
                int(v) for v in rng.integers(1, 9, size=2)
            )
            b = tuple(int(v) for v in rng.integers(0, 8, size=2)) + tuple(
                int(v) for v in rng.integers(1, 9, size=2)
            )
            assert box_iou(Box(*a), Box(*b)) == pytest.approx(oracles.rasterized_box_iou(a, b))


class TestMaskToBox:
    def test_single_pixel(self):
        grid = np.zeros((8, 8), dtype=bool)
        grid[3, 5] = True
        assert mask_to_box(BitMask(grid)) == Box(x=5, y=3, w=1, h=1)

    def test_full_image(self):
        m = BitMask(np.ones((4, 6), dtype=bool))
        assert mask_to_box(m) == Box(0, 0, 6, 4)

    def test_l_shape_matches_scan(self):
        grid = np.zeros((10, 10), dtype=bool)
        grid[2:8, 3] = True
        grid[7, 3:9] = True
        box = mask_to_box(BitMask(grid))
        assert (box.x, box.y, box.w, box.h) == oracles.scan_bounds(grid)

    def test_empty_mask_raises(self):
        with pytest.raises(DataError, match="empty"):
            mask_to_box(BitMask.zeros(3, 3))


class TestLaplacian:
    def test_constant_masks_zero_in_interior(self):
        for fill in (0.0, 1.0):
            grid = np.full((9, 9), fill)
            resp = laplacian(grid)
            assert np.all(resp[2:-2, 2:-2] == 0.0)

    def test_single_pixel_kernel_readout(self):
        grid = np.zeros((11, 11))
        grid[5, 5] = 1.0
        resp = laplacian(grid)
        assert resp[5, 5] == 24.0
        for dr in range(-2, 3):
            for dc in range(-2, 3):
                if (dr, dc) != (0, 0):
                    assert resp[5 + dr, 5 + dc] == 1.0
        assert resp[5, 8] == 0.0

    def test_square_response_band_matches_naive_convolution(self):
        from soba.masks import LAPLACIAN_KERNEL

        grid = np.zeros((32, 32))
        grid[10:20, 10:20] = 1.0
        resp = laplacian(grid)
        expected = np.abs(oracles.convolve_naive(grid, np.asarray(LAPLACIAN_KERNEL)))
        np.testing.assert_allclose(resp, expected, atol=1e-9)
        # non-zero responses hug the square's boundary
        nz_rows, nz_cols = np.nonzero(resp > 1e-9)
        inside = (
            (nz_rows >= 8) & (nz_rows < 22) & (nz_cols >= 8) & (nz_cols < 22)
            & ~((nz_rows >= 12) & (nz_rows < 18) & (nz_cols >= 12) & (nz_cols < 18))
        )
        assert inside.all()


class TestDistanceTransform:
    def test_adjacent_pixel(self):
        grid = np.zeros((5, 5), dtype=bool)
        grid[2, 2] = True
        d = distance_transform(BitMask(grid))
        assert d[2, 3] == 1.0
        assert d[2, 2] == 0.0

    def test_empty_boundary_raises(self):
        with pytest.raises(DataError):
            distance_transform(BitMask.zeros(4, 4))

    def test_matches_brute_force_on_random_grids(self, rng):
        for _ in range(15):
            grid = random_bool_grid(rng, 16, 16, density=0.1)
            if not grid.any():
                grid[0, 0] = True
            got = distance_transform(BitMask(grid))
            expected = oracles.nearest_set_pixel_distances(grid)
            np.testing.assert_allclose(got, expected, atol=1e-9)


class TestThresholdBand:
    def test_uniform_field_is_empty_band(self):
        band = threshold_band(np.full((4, 4), 3.0))
        assert band.is_empty()

    def test_linear_ramp_first_half(self):
        field = np.tile(np.arange(10.0), (3, 1))
        band = threshold_band(field)
        assert np.array_equal(band.pixels[:, :5], np.ones((3, 5), dtype=bool))
        assert not band.pixels[:, 5:].any()

    def test_square_boundary_band_matches_pointwise(self, rng):
        grid = np.zeros((20, 20), dtype=bool)
        grid[5:15, 5] = grid[5:15, 14] = True
        grid[5, 5:15] = grid[14, 5:15] = True
        d = distance_transform(BitMask(grid))
        band = threshold_band(d)
        expected = d / d.max() < 0.5
        assert np.array_equal(band.pixels, expected)

    def test_degenerate_field_raises(self):
        with pytest.raises(DataError, match="degenerate"):
            threshold_band(np.zeros((3, 3)))


class TestSetOpsAndTranslate:
    def test_union_idempotent_difference_empty(self, rng):
        a = BitMask(random_bool_grid(rng, 6, 6))
        assert mask_union(a, a) == a
        assert mask_difference(a, a).is_empty()

    def test_translate_identity(self, rng):
        a = BitMask(random_bool_grid(rng, 6, 6))
        assert translate_mask(a, 0, 0) == a

    def test_translate_single_pixel(self):
        grid = np.zeros((4, 4), dtype=bool)
        grid[0, 0] = True
        moved = translate_mask(BitMask(grid), 2, 1)
        assert moved.area() == 1
        assert moved.pixels[1, 2]

    def test_translate_clips(self):
        grid = np.ones((3, 3), dtype=bool)
        moved = translate_mask(BitMask(grid), 2, 0)
        assert moved.area() == 3
        assert moved.pixels[:, 2].all()

    @given(
        st.integers(min_value=-7, max_value=7),
        st.integers(min_value=-7, max_value=7),
        st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=80, deadline=None)
    def test_translate_round_trip_on_unclipped_pixels(self, dx, dy, seed):
        grid = np.random.default_rng(seed).random((6, 6)) < 0.4
        m = BitMask(grid)
        back = translate_mask(translate_mask(m, dx, dy), -dx, -dy)
        # pixels that survive the forward clip must return exactly
        survived = translate_mask(translate_mask(m, dx, dy), -dx, -dy).pixels
        assert np.array_equal(survived, back.pixels)
        assert np.all(back.pixels <= m.pixels)

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            mask_union(BitMask.zeros(2, 2), BitMask.zeros(2, 3))


class TestSoftMask:
    def test_range_validation(self):
        with pytest.raises(DataError, match=r"\[0, 1\]"):
            SoftMask(np.array([[0.5, 1.2]]))

    def test_binarize_at_half(self):
        sm = SoftMask(np.array([[0.49, 0.5], [0.51, 0.0]]))
        assert np.array_equal(sm.binarize().pixels, [[False, True], [True, False]])

    def test_from_bitmask_round_trip(self, rng):
        m = BitMask(random_bool_grid(rng, 5, 5))
        assert SoftMask.from_bitmask(m).binarize() == m
