import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ycnn import nn
from ycnn.loss import (LossConfig, batch_loss, indicator_map, make_label_map, masked_loss, masked_loss_grad,
                       naive_loss, naive_loss_grad, weighting_map)

E3 = math.exp(3.0)
grids = arrays(np.float64, (5, 5), elements=st.floats(-2, 2, allow_nan=False))


class TestLabelMap:
    def test_peak_is_one(self):
        lm = make_label_map((7, 11), 24)
        assert lm.values[7, 11] == 1.0
        assert lm.values.max() == 1.0

    def test_rotation_symmetry(self):
        v = make_label_map((12, 12), 25).values
        np.testing.assert_allclose(np.rot90(v), v, atol=0)

    def test_value_at_distance_six(self):
        v = make_label_map((12, 12), 24, 0.1).values
        expected = math.exp(-36 / (2 * 2.4 ** 2))
        assert v[12, 18] == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.0439, abs=1e-4)
        assert expected < 0.05

    def test_mostly_background(self):
        # cells with value >= 0.05 are exactly those with d^2 <= 2 sigma^2 ln 20
        v = make_label_map((12, 12), 24, 0.1).values
        rows, cols = np.mgrid[0:24, 0:24]
        inside = (rows - 12) ** 2 + (cols - 12) ** 2 <= 2 * 2.4 ** 2 * math.log(20)
        assert np.mean(v < 0.05) == pytest.approx(1 - inside.mean(), abs=0)
        assert np.mean(v < 0.05) > 0.8
        corner = make_label_map((0, 0), 24, 0.1).values
        assert np.mean(corner < 0.05) > 0.94

    def test_outside_grid(self):
        with pytest.raises(ValueError):
            make_label_map((24, 0), 24)


class TestNaive:
    def test_equal(self):
        m = np.random.default_rng(0).random((4, 4))
        assert naive_loss(m, m) == 0.0

    def test_small(self):
        assert naive_loss(np.array([0.1, -0.1]), np.zeros(2)) == pytest.approx(0.02, abs=1e-15)

    def test_homogeneity(self):
        rng = np.random.default_rng(1)
        m, ml = rng.random((2, 6, 6))
        assert naive_loss(ml + 2 * (m - ml), ml) == pytest.approx(4 * naive_loss(m, ml))

    def test_grad(self):
        np.testing.assert_allclose(naive_loss_grad(np.array([0.5]), np.array([1.0])), [-1.0])


class TestWeights:
    def test_background(self):
        assert weighting_map(np.array(0.0)) == pytest.approx(0.1, abs=1e-15)

    def test_peak(self):
        assert weighting_map(np.array(1.0)) == pytest.approx(0.1 * E3, abs=1e-12)
        assert 0.1 * E3 == pytest.approx(2.0086, abs=1e-4)

    def test_ratio(self):
        w = weighting_map(np.array([0.0, 1.0]))
        assert w[1] / w[0] == pytest.approx(E3, rel=1e-12)


class TestIndicator:
    def test_below(self):
        assert indicator_map(np.array([0.04]), np.array([0.0]))[0] == 0

    def test_boundary_counts(self):
        assert indicator_map(np.array([0.05]), np.array([0.0]))[0] == 1

    def test_above(self):
        assert indicator_map(np.array([-0.2]), np.array([0.0]))[0] == 1


class TestMasked:
    def test_equal(self):
        ml = make_label_map((3, 3), 8).values
        assert masked_loss(ml, ml) == 0.0

    def test_worked_cell(self):
        val = masked_loss(np.array([[0.5]]), np.array([[1.0]]))
        assert val == pytest.approx((0.1 * E3 * 0.5) ** 2, abs=1e-12)
        assert val == pytest.approx(1.0086, abs=1e-4)

    def test_small_background_dropped(self):
        assert masked_loss(np.array([[0.04]]), np.array([[0.0]])) == 0.0

    def test_worked_grad(self):
        g = masked_loss_grad(np.array([[0.5]]), np.array([[1.0]]))
        assert g[0, 0] == pytest.approx(2 * (0.1 * E3) ** 2 * -0.5, abs=1e-12)
        assert g[0, 0] == pytest.approx(-4.034, abs=1e-3)

    def test_masked_cells_zero_grad(self):
        g = masked_loss_grad(np.array([0.01, 0.3]), np.array([0.0, 0.0]))
        assert g[0] == 0.0 and g[1] != 0.0

    def test_first_step_raises_peak(self):
        ml = make_label_map((5, 5), 12).values
        g = masked_loss_grad(np.zeros_like(ml), ml)
        assert g[5, 5] == pytest.approx(2 * (0.1 * E3) ** 2 * -1.0)
        assert (np.zeros_like(ml) - 0.01 * g)[5, 5] > 0

    def test_finite_difference_away_from_mask(self):
        with nn.precision("float64"):
            rng = np.random.default_rng(2)
            ml = make_label_map((4, 4), 10).values
            m = rng.normal(scale=0.3, size=ml.shape)
            h = 1e-5
            away = np.abs(np.abs(m - ml) - 0.05) > 10 * h
            coords = np.flatnonzero(away)
            err = nn.finite_difference_check(lambda v: masked_loss(v, ml), m, masked_loss_grad(m, ml), h, coords)
            assert err < 1e-6

    def test_bad_config(self):
        with pytest.raises(ValueError):
            LossConfig(th=0.0)
        with pytest.raises(ValueError):
            LossConfig(a=-1)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            masked_loss(np.zeros((2, 2)), np.zeros((3, 3)))

    @settings(max_examples=60, deadline=None)
    @given(grids, grids)
    def test_bounded_by_naive(self, m, ml):
        ml = np.abs(ml) / 2
        w = weighting_map(ml)
        assert masked_loss(m, ml) <= naive_loss(m, ml) * float(w.max()) ** 2 * (1 + 1e-12) + 1e-12

    @settings(max_examples=60, deadline=None)
    @given(grids, grids, st.randoms(use_true_random=False))
    def test_permutation_invariant(self, m, ml, rnd):
        perm = list(range(m.size))
        rnd.shuffle(perm)
        a = masked_loss(m, ml)
        b = masked_loss(m.reshape(-1)[perm], ml.reshape(-1)[perm])
        assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


class TestBatch:
    def test_mean_of_pairs(self):
        rng = np.random.default_rng(3)
        maps = rng.normal(scale=0.3, size=(4, 6, 6))
        labels = np.stack([make_label_map((i, i), 6).values for i in range(4)])
        mean, per, grad = batch_loss(maps, labels)
        np.testing.assert_allclose(per, [masked_loss(m, l) for m, l in zip(maps, labels)], rtol=1e-12)
        assert mean == pytest.approx(per.mean())
        np.testing.assert_allclose(grad[1], masked_loss_grad(maps[1], labels[1]) / 4, rtol=1e-12)

    def test_naive_kind(self):
        maps = np.zeros((2, 3, 3))
        labels = np.ones((2, 3, 3))
        mean, _, grad = batch_loss(maps, labels, kind="naive")
        assert mean == 9.0
        np.testing.assert_allclose(grad, -1.0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            batch_loss(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), kind="l1")
