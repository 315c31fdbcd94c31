import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ranktrack import numerics as nm
from ranktrack.geometry import (
    Box,
    HeadGrid,
    IGNORE,
    NEGATIVE,
    POSITIVE,
    assign_labels,
    decode,
    encode,
    iou,
    iou_loss,
    iou_tensor,
)
from ranktrack.numerics import Tensor, backward, finite_diff_check

boxes = st.builds(
    lambda x, y, w, h: Box(x, y, x + w, y + h),
    st.floats(-50, 50), st.floats(-50, 50), st.floats(0, 60), st.floats(0, 60))


class TestIoU:
    def test_identical(self):
        b = Box(2, 3, 10, 12)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 5, 5), Box(10, 10, 12, 12)) == 0.0

    def test_half_overlap_strip(self):
        # frozen: intersection 50, union 150
        assert iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == pytest.approx(
            0.3333333333333333, abs=1e-15)

    def test_degenerate_is_zero(self):
        assert iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0.0

    @given(boxes, boxes)
    @settings(max_examples=80, deadline=None)
    def test_symmetric(self, a, b):
        assert iou(a, b) == iou(b, a)

    @given(boxes, boxes, st.floats(-100, 100), st.floats(-100, 100))
    @settings(max_examples=80, deadline=None)
    def test_translation_invariant(self, a, b, dx, dy):
        assert iou(a.translated(dx, dy), b.translated(dx, dy)) == pytest.approx(
            iou(a, b), abs=1e-12)

    @given(boxes, boxes)
    @settings(max_examples=80, deadline=None)
    def test_range(self, a, b):
        assert 0.0 <= iou(a, b) <= 1.0


class TestBox:
    def test_invalid_extent_rejected(self):
        with pytest.raises(ValueError):
            Box(5, 0, 4, 10)

    def test_clipped(self):
        b = Box(-5, -5, 300, 40).clipped(100, 50)
        assert (b.x1, b.y1, b.x2, b.y2) == (0, 0, 100, 40)


class TestAssignLabels:
    def grid(self):
        return HeadGrid.centered(128, 9, 9, 8.0)

    def test_center_is_positive(self):
        grid = self.grid()
        gt = Box(54, 54, 74, 74)  # center 64, half-width 10, shrunk half 5
        labels = assign_labels(grid, gt)
        px, py = grid.pixel_xy()
        center_idx = np.argwhere((px == 64.0) & (py == 64.0))
        assert labels.cls[tuple(center_idx[0])] == POSITIVE

    def test_outside_is_negative(self):
        grid = self.grid()
        labels = assign_labels(grid, Box(54, 54, 74, 74))
        assert labels.cls[0, 0] == NEGATIVE

    def test_ring_is_ignore(self):
        grid = self.grid()
        # gt half-width 12 about 64: shrunk box spans [58, 70]; grid point at
        # 72 sits at 0.75 of the half-width: inside gt, outside shrunk
        gt = Box(52, 52, 76, 76)
        labels = assign_labels(grid, gt)
        px, py = grid.pixel_xy()
        idx = tuple(np.argwhere((px == 72.0) & (py == 64.0))[0])
        assert labels.cls[idx] == IGNORE

    def test_partition_covers_grid(self):
        grid = self.grid()
        labels = assign_labels(grid, Box(40, 50, 90, 88))
        counts = sum(int(np.sum(labels.cls == c)) for c in (POSITIVE, NEGATIVE, IGNORE))
        assert counts == grid.height * grid.width

    def test_gt_outside_grid_all_negative(self):
        labels = assign_labels(self.grid(), Box(200, 200, 220, 220))
        assert labels.n_pos == 0
        assert labels.n_neg == 81

    def test_regression_targets_nonnegative_at_positives(self):
        grid = self.grid()
        labels = assign_labels(grid, Box(40, 50, 90, 88))
        pos = labels.cls == POSITIVE
        assert labels.n_pos > 0
        assert np.all(labels.targets[:, pos] >= 0)


class TestEncodeDecode:
    def test_symmetric_offsets(self):
        assert decode((50, 50), (10, 10, 10, 10)) == Box(40, 40, 60, 60)

    def test_round_trip(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            x1, y1 = rng.uniform(0, 100, 2)
            b = Box(x1, y1, x1 + rng.uniform(1, 80), y1 + rng.uniform(1, 80))
            px = rng.uniform(b.x1, b.x2)
            py = rng.uniform(b.y1, b.y2)
            back = decode((px, py), encode((px, py), b))
            for got, want in zip(back.as_array(), b.as_array()):
                assert got == pytest.approx(want, abs=1e-12)

    def test_zero_offsets_degenerate(self):
        b = decode((7, 9), (0, 0, 0, 0))
        assert b.area == 0.0 and b.center == (7, 9)

    def test_negative_offsets_clamped(self):
        b = decode((10, 10), (-5, 2, 3, -1))
        assert b == Box(10, 8, 13, 10)


class TestIoULossTensor:
    def test_perfect_prediction(self):
        gt = Box(10, 20, 50, 80)
        loss = iou_loss(Tensor(gt.as_array()), gt)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_is_one(self):
        loss = iou_loss(Tensor([0.0, 0.0, 5.0, 5.0]), Box(50, 50, 80, 80))
        assert loss.item() == 1.0

    def test_one_third_overlap(self):
        # frozen: 1 - 50/150
        loss = iou_loss(Tensor([0.0, 0.0, 10.0, 10.0]), Box(5, 0, 15, 10))
        assert loss.item() == pytest.approx(0.6666666666666667, abs=1e-12)

    def test_zero_area_pred_flat_region(self):
        pred = Tensor([30.0, 30.0, 30.0, 30.0], requires_grad=True)
        loss = iou_loss(pred, Box(10, 10, 50, 50))
        assert loss.item() == 1.0
        backward(loss)
        np.testing.assert_array_equal(pred.grad, np.zeros(4))

    def test_gradient_matches_finite_differences(self, rng_points):
        gt = Box(20, 30, 60, 75)
        for _ in range(10):
            pred = np.array([20, 30, 60, 75]) + rng_points.uniform(-8, 8, 4)
            err = finite_diff_check(lambda t: iou_loss(t, gt), Tensor(pred))
            assert err < 1e-4

    def test_matches_float_iou(self, rng_points):
        gt = Box(10, 10, 40, 45)
        for _ in range(25):
            c = rng_points.uniform(5, 50, 2)
            w, h = rng_points.uniform(1, 30, 2)
            b = Box(c[0], c[1], c[0] + w, c[1] + h)
            got = iou_tensor(Tensor(b.x1), Tensor(b.y1), Tensor(b.x2), Tensor(b.y2), gt)
            assert got.item() == pytest.approx(iou(b, gt), abs=1e-12)

    def test_vectorized_matches_scalar(self):
        gt = Box(0, 0, 10, 10)
        xs1 = Tensor([1.0, -5.0])
        ys1 = Tensor([1.0, 0.0])
        xs2 = Tensor([9.0, 2.0])
        ys2 = Tensor([11.0, 10.0])
        out = iou_tensor(xs1, ys1, xs2, ys2, gt)
        expect = [iou(Box(1, 1, 9, 11), gt), iou(Box(-5, 0, 2, 10), gt)]
        np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_head_grid_mapping():
    grid = HeadGrid.centered(128, 9, 9, 8.0)
    px, py = grid.pixel_xy()
    assert px[0, 0] == 32.0 and px[0, -1] == 96.0
    assert py[4, 4] == 64.0
    assert px.shape == (9, 9)
