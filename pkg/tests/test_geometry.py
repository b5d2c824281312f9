import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vql.errors import GeometryError
from vql.geometry import (Box, center_from_corners, clamp_min_side,
                          corners_from_center, giou, giou_array, iou,
                          iou_array, pairwise_iou)


def rasterized_iou(a: Box, b: Box, side: int = 64) -> float:
    """Brute-force oracle: rasterize integer boxes on a pixel grid and count.

    Valid for boxes with integer corners inside [0, side]^2.
    """
    grid_a = np.zeros((side, side), dtype=bool)
    grid_b = np.zeros((side, side), dtype=bool)
    ax1, ay1, ax2, ay2 = (int(round(v)) for v in a.to_corners())
    bx1, by1, bx2, by2 = (int(round(v)) for v in b.to_corners())
    grid_a[ay1:ay2, ax1:ax2] = True
    grid_b[by1:by2, bx1:bx2] = True
    inter = np.logical_and(grid_a, grid_b).sum()
    union = np.logical_or(grid_a, grid_b).sum()
    return inter / union


def random_box(rng, lo=0.1, hi=60.0):
    w = rng.uniform(0.5, hi / 2)
    h = rng.uniform(0.5, hi / 2)
    cx = rng.uniform(lo, hi)
    cy = rng.uniform(lo, hi)
    return Box(cx, cy, w, h)


class TestIoU:
    def test_identity(self):
        b = Box(3.0, 4.0, 2.0, 5.0)
        assert iou(b, b) == pytest.approx(1.0)

    def test_quarter_overlap(self):
        # intersection 1, union 7
        a = Box(1, 1, 2, 2)
        b = Box(2, 2, 2, 2)
        assert iou(a, b) == pytest.approx(1.0 / 7.0)

    def test_disjoint(self):
        a = Box(0.5, 0.5, 1, 1)
        b = Box(2.5, 2.5, 1, 1)
        assert iou(a, b) == 0.0

    def test_degenerate_raises(self):
        with pytest.raises(GeometryError):
            iou(Box(0, 0, 0, 1), Box(0, 0, 1, 1))
        with pytest.raises(GeometryError):
            iou(Box(0, 0, 1, 1), Box(0, 0, 1, -2))

    def test_matches_rasterization_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(300):
            x1, y1 = rng.integers(0, 40, size=2)
            w1, h1 = rng.integers(1, 24, size=2)
            x2, y2 = rng.integers(0, 40, size=2)
            w2, h2 = rng.integers(1, 24, size=2)
            a = Box.from_corners(x1, y1, x1 + w1, y1 + h1)
            b = Box.from_corners(x2, y2, x2 + w2, y2 + h2)
            assert iou(a, b) == pytest.approx(rasterized_iou(a, b), abs=1e-9)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            v = iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == pytest.approx(iou(b, a), abs=1e-12)


class TestGIoU:
    def test_identity(self):
        b = Box(3.0, 4.0, 2.0, 5.0)
        assert giou(b, b) == pytest.approx(1.0)

    def test_disjoint_value(self):
        # enclosing box area 9, union 2, iou 0 -> -7/9
        a = Box(0.5, 0.5, 1, 1)
        b = Box(2.5, 2.5, 1, 1)
        assert giou(a, b) == pytest.approx(-7.0 / 9.0)

    def test_containment_equals_iou(self):
        outer = Box(5, 5, 8, 8)
        inner = Box(5, 6, 2, 2)
        assert giou(outer, inner) == pytest.approx(iou(outer, inner))

    def test_bounds_vs_iou_random(self):
        rng = np.random.default_rng(11)
        for _ in range(10_000):
            a, b = random_box(rng), random_box(rng)
            g, i = giou(a, b), iou(a, b)
            assert g <= i + 1e-12
            assert g >= i - 1.0 - 1e-12
            assert -1.0 - 1e-12 <= g <= 1.0 + 1e-12

    def test_symmetric(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a, b = random_box(rng), random_box(rng)
            assert giou(a, b) == pytest.approx(giou(b, a), abs=1e-12)

    def test_degenerate_raises(self):
        with pytest.raises(GeometryError):
            giou(Box(0, 0, 1, 0), Box(0, 0, 1, 1))


class TestConversions:
    def test_to_corners(self):
        assert Box(2, 2, 2, 2).to_corners() == (1, 1, 3, 3)

    def test_from_corners(self):
        assert Box.from_corners(0, 0, 4, 2) == Box(2, 1, 4, 2)

    @given(cx=st.floats(-100, 100), cy=st.floats(-100, 100),
           w=st.floats(0.01, 50), h=st.floats(0.01, 50))
    @settings(max_examples=200, deadline=None)
    def test_round_trip(self, cx, cy, w, h):
        b = Box(cx, cy, w, h)
        rt = Box.from_corners(*b.to_corners())
        assert rt.cx == pytest.approx(b.cx, rel=1e-12, abs=1e-9)
        assert rt.cy == pytest.approx(b.cy, rel=1e-12, abs=1e-9)
        assert rt.w == pytest.approx(b.w, rel=1e-12, abs=1e-9)
        assert rt.h == pytest.approx(b.h, rel=1e-12, abs=1e-9)

    def test_array_round_trip(self):
        rng = np.random.default_rng(0)
        boxes = np.column_stack([rng.uniform(0, 10, 50), rng.uniform(0, 10, 50),
                                 rng.uniform(0.1, 5, 50), rng.uniform(0.1, 5, 50)])
        np.testing.assert_allclose(center_from_corners(corners_from_center(boxes)),
                                   boxes, rtol=0, atol=1e-12)


class TestClamp:
    def test_negative_side_clamped(self):
        out = clamp_min_side(np.array([5.0, 5.0, -3.0, 0.0]))
        assert out[2] == 1.0 and out[3] == 1.0

    def test_valid_untouched(self):
        out = clamp_min_side(np.array([5.0, 5.0, 3.0, 2.0]))
        np.testing.assert_array_equal(out, [5.0, 5.0, 3.0, 2.0])

    def test_corner_order_after_clamp(self):
        c = corners_from_center(clamp_min_side(np.array([1.0, 1.0, -7.0, -7.0])))
        assert c[0] < c[2] and c[1] < c[3]


class TestArrayAPI:
    def test_pairwise_shape(self):
        a = np.tile([5, 5, 2, 2], (3, 1)).astype(float)
        b = np.tile([5, 5, 2, 2], (4, 1)).astype(float)
        m = pairwise_iou(a, b)
        assert m.shape == (3, 4)
        np.testing.assert_allclose(m, 1.0)

    def test_matches_scalar_api(self):
        rng = np.random.default_rng(9)
        a = [random_box(rng) for _ in range(20)]
        b = [random_box(rng) for _ in range(20)]
        arr = iou_array(np.stack([x.as_array() for x in a]),
                        np.stack([x.as_array() for x in b]))
        garr = giou_array(np.stack([x.as_array() for x in a]),
                          np.stack([x.as_array() for x in b]))
        for i in range(20):
            assert arr[i] == pytest.approx(iou(a[i], b[i]))
            assert garr[i] == pytest.approx(giou(a[i], b[i]))
