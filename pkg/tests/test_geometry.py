"""Box arithmetic, letterboxing, and anchor offset coding."""

import math

import numpy as np
import pytest

from ppgn.errors import InvalidInputError
from ppgn.geometry import (
    Box,
    decode_offsets,
    encode_offsets,
    iou,
    letterbox,
)


def random_inner_box(rng) -> Box:
    w = rng.uniform(0.02, 0.5)
    h = rng.uniform(0.02, 0.5)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return Box(cx, cy, w, h)


class TestBox:
    def test_corner_derivation(self):
        b = Box(0.5, 0.4, 0.2, 0.1)
        np.testing.assert_allclose(b.corners(), (0.4, 0.35, 0.6, 0.45), atol=1e-12)
        assert b.area == pytest.approx(0.02)

    def test_degenerate_rejected(self):
        with pytest.raises(InvalidInputError):
            Box(0.5, 0.5, 0.0, 0.1)
        with pytest.raises(InvalidInputError):
            Box(0.5, 0.5, 0.1, -0.2)
        with pytest.raises(InvalidInputError):
            Box(float("nan"), 0.5, 0.1, 0.1)

    def test_from_corners_roundtrip(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            b = random_inner_box(rng)
            b2 = Box.from_corners(*b.corners())
            assert b2.cx == pytest.approx(b.cx, abs=1e-12)
            assert b2.w == pytest.approx(b.w, abs=1e-12)

    def test_from_corners_rejects_inverted(self):
        with pytest.raises(InvalidInputError):
            Box.from_corners(0.5, 0.1, 0.4, 0.2)


class TestIoU:
    def test_identity(self):
        b = Box(0.5, 0.5, 0.2, 0.2)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        # corners (0,0,2,2) and (3,3,4,4) scaled into the unit square
        a = Box.from_corners(0.0, 0.0, 0.5, 0.5)
        b = Box.from_corners(0.75, 0.75, 1.0, 1.0)
        assert iou(a, b) == 0.0

    def test_quarter_overlap(self):
        # corners (0,0,2,2) vs (1,1,3,3): intersection 1, union 7
        a = Box.from_corners(0.0, 0.0, 0.5, 0.5)
        b = Box.from_corners(0.25, 0.25, 0.75, 0.75)
        assert iou(a, b) == pytest.approx(1.0 / 7.0, abs=1e-12)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            a, b = random_inner_box(rng), random_inner_box(rng)
            v = iou(a, b)
            assert v == iou(b, a)
            assert 0.0 <= v <= 1.0

    def test_pixel_count_oracle_exact(self):
        """On the 8x8 integer grid, IoU equals subcell counting exactly."""
        rng = np.random.default_rng(13)
        checked_one = False
        for _ in range(300):
            x1, x2 = sorted(rng.choice(9, size=2, replace=False))
            y1, y2 = sorted(rng.choice(9, size=2, replace=False))
            u1, u2 = sorted(rng.choice(9, size=2, replace=False))
            v1, v2 = sorted(rng.choice(9, size=2, replace=False))
            a = Box.from_corners(x1 / 8, y1 / 8, x2 / 8, y2 / 8)
            b = Box.from_corners(u1 / 8, v1 / 8, u2 / 8, v2 / 8)

            grid = np.zeros((8, 8, 2), dtype=bool)
            grid[y1:y2, x1:x2, 0] = True
            grid[v1:v2, u1:u2, 1] = True
            inter = int((grid[:, :, 0] & grid[:, :, 1]).sum())
            union = int((grid[:, :, 0] | grid[:, :, 1]).sum())
            expected = inter / union
            assert iou(a, b) == expected
            checked_one = checked_one or inter > 0
            # exact self-identity only for the same box
            assert (iou(a, b) == 1.0) == (a.corners() == b.corners())
        assert checked_one

    def test_one_only_for_identical_boxes(self):
        a = Box.from_corners(0.0, 0.0, 0.5, 0.5)
        b = Box.from_corners(0.0, 0.0, 0.5, 0.625)
        assert iou(a, b) < 1.0


class TestLetterbox:
    def test_wide_input(self):
        t = letterbox(512, 256, 256)
        assert t.scale == 0.5
        assert t.pad_x == 0.0
        assert t.pad_y == 64.0  # split evenly: 64 above, 64 below
        assert t.content_w == 256.0
        assert t.content_h == 128.0

    def test_square_identity(self):
        t = letterbox(256, 256, 256)
        assert t.scale == 1.0
        assert t.pad_x == 0.0 and t.pad_y == 0.0

    def test_tall_input(self):
        t = letterbox(100, 400, 256)
        assert t.scale == pytest.approx(0.64)
        assert t.pad_x == pytest.approx(96.0)
        assert t.pad_y == 0.0
        assert t.content_w == pytest.approx(64.0)

    def test_invalid_dimensions(self):
        for args in [(0, 10, 128), (10, -3, 128), (10, 10, 0)]:
            with pytest.raises(InvalidInputError):
                letterbox(*args)

    def test_box_roundtrip(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            sw, sh = rng.integers(20, 800, size=2)
            t = letterbox(int(sw), int(sh), 128)
            b = random_inner_box(rng)
            back = t.invert_box(t.apply_box(b))
            for got, want in zip(back.corners(), b.corners()):
                assert got == pytest.approx(want, abs=1e-9)

    def test_aspect_ratio_preserved(self):
        rng = np.random.default_rng(22)
        for _ in range(100):
            sw, sh = (int(v) for v in rng.integers(20, 800, size=2))
            t = letterbox(sw, sh, 256)
            b = random_inner_box(rng)
            mapped = t.apply_box(b)
            src_px_ratio = (b.w * sw) / (b.h * sh)
            out_px_ratio = (mapped.w * 256) / (mapped.h * 256)
            assert out_px_ratio == pytest.approx(src_px_ratio, abs=1e-9)

    def test_exactly_one_pad_axis(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            sw, sh = (int(v) for v in rng.integers(20, 500, size=2))
            t = letterbox(sw, sh, 128)
            if sw == sh:
                assert t.pad_x == 0.0 and t.pad_y == 0.0
            else:
                assert (t.pad_x == 0.0) != (t.pad_y == 0.0)


class TestOffsets:
    def test_centered_matching_anchor(self):
        gt = Box(0.4375, 0.5625, 0.1, 0.2)
        t = encode_offsets(gt, (0.1, 0.2), (0, 4, 3), 8)
        assert t.sx == pytest.approx(0.5, abs=1e-12)
        assert t.sy == pytest.approx(0.5, abs=1e-12)
        assert t.tw == pytest.approx(0.0, abs=1e-12)
        assert t.th == pytest.approx(0.0, abs=1e-12)

    def test_log_ratio(self):
        gt = Box(0.4375, 0.5625, 0.2, 0.2)
        t = encode_offsets(gt, (0.1, 0.2), (0, 4, 3), 8)
        assert t.tw == pytest.approx(math.log(2.0), abs=1e-9)

    def test_center_outside_cell_rejected(self):
        gt = Box(0.9, 0.5625, 0.1, 0.2)
        with pytest.raises(InvalidInputError):
            encode_offsets(gt, (0.1, 0.2), (0, 4, 3), 8)

    def test_zero_anchor_rejected(self):
        gt = Box(0.4375, 0.5625, 0.1, 0.2)
        with pytest.raises(InvalidInputError):
            encode_offsets(gt, (0.0, 0.2), (0, 4, 3), 8)

    def test_decode_zero_offsets(self):
        b = decode_offsets(0.5, 0.5, 0.0, 0.0, (0.1, 0.2), (0, 4, 3), 8)
        assert b.cx == pytest.approx(0.4375, abs=1e-12)
        assert b.cy == pytest.approx(0.5625, abs=1e-12)
        assert b.w == pytest.approx(0.1, abs=1e-12)
        assert b.h == pytest.approx(0.2, abs=1e-12)

    def test_decode_doubles_width(self):
        b = decode_offsets(0.5, 0.5, math.log(2.0), 0.0, (0.1, 0.1), (0, 4, 4), 16)
        assert b.w == pytest.approx(0.2, abs=1e-9)

    def test_decode_rejects_bad_sigmoid_values(self):
        with pytest.raises(InvalidInputError):
            decode_offsets(1.5, 0.5, 0.0, 0.0, (0.1, 0.1), (0, 0, 0), 8)

    def test_decode_clamps_to_unit_square(self):
        b = decode_offsets(0.1, 0.1, 8.0, 8.0, (0.5, 0.5), (0, 0, 0), 4)
        assert b.corners() == (0.0, 0.0, 1.0, 1.0)
        # Extreme values must not overflow.
        b = decode_offsets(0.5, 0.5, 1000.0, 1000.0, (0.5, 0.5), (0, 1, 1), 4)
        assert b.x2 <= 1.0 and b.y2 <= 1.0

    def test_roundtrip_on_random_boxes(self):
        rng = np.random.default_rng(31)
        for _ in range(1000):
            grid = int(rng.choice([2, 4, 8, 16]))
            b = random_inner_box(rng)
            col = min(int(b.cx * grid), grid - 1)
            row = min(int(b.cy * grid), grid - 1)
            anchor = (rng.uniform(0.02, 0.6), rng.uniform(0.02, 0.6))
            enc = encode_offsets(b, anchor, (0, row, col), grid)
            dec = decode_offsets(
                enc.sx, enc.sy, enc.tw, enc.th, anchor, (0, row, col), grid
            )
            for got, want in zip(
                (dec.cx, dec.cy, dec.w, dec.h), (b.cx, b.cy, b.w, b.h)
            ):
                assert got == pytest.approx(want, abs=1e-6)
