import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from buildseg import tensor as T
from buildseg.metrics import (ConfusionCounts, accumulate, biou, boundary_band, cross_entropy,
                              default_band_width, iou)

import oracles

masks16 = arrays(np.uint8, (16, 16), elements=st.integers(0, 1))


def block(shape, top, left, h, w):
    m = np.zeros(shape, dtype=np.uint8)
    m[top:top + h, left:left + w] = 1
    return m


class TestCrossEntropy:
    def test_perfect_prediction(self):
        target = np.random.default_rng(0).integers(0, 2, (4, 4)).astype(np.uint8)
        logits = np.stack([np.where(target == 0, 20.0, 0.0), np.where(target == 1, 20.0, 0.0)])
        assert cross_entropy(T.Tensor(logits, dtype=np.float64), target).item() <= 1e-6

    def test_equal_logits(self):
        loss = cross_entropy(T.Tensor(np.zeros((2, 3, 3))), np.ones((3, 3), np.uint8)).item()
        assert abs(loss - math.log(2)) < 1e-7

    def test_gradient_4x4(self):
        rng = np.random.default_rng(1)
        target = rng.integers(0, 2, (4, 4)).astype(np.uint8)
        z0 = rng.standard_normal((2, 4, 4))
        z = T.Tensor(z0, requires_grad=True, dtype=np.float64)
        with T.Tape() as tape:
            loss = cross_entropy(z, target)
        T.backward(loss, tape)
        ref = T.finite_diff_grad(lambda t: cross_entropy(t, target), T.Tensor(z0, dtype=np.float64))
        assert T.relative_error(z.grad, ref) <= 1e-6

    def test_valid_mask_excludes_pixels(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((2, 4, 4))
        target = rng.integers(0, 2, (4, 4)).astype(np.uint8)
        valid = np.zeros((4, 4), np.uint8)
        valid[:2] = 1
        masked = cross_entropy(T.Tensor(z, dtype=np.float64), target, valid).item()
        cropped = cross_entropy(T.Tensor(z[:, :2], dtype=np.float64), target[:2]).item()
        assert abs(masked - cropped) < 1e-14

    def test_decreases_when_true_logit_rises(self):
        z = np.zeros((2, 2, 2))
        target = np.ones((2, 2), np.uint8)
        before = cross_entropy(T.Tensor(z, dtype=np.float64), target).item()
        z[1, 0, 0] = 1.0
        assert cross_entropy(T.Tensor(z, dtype=np.float64), target).item() < before

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (2, 3, 3), elements=st.floats(-30, 30)), arrays(np.uint8, (3, 3), elements=st.integers(0, 1)))
    def test_nonnegative(self, z, target):
        assert cross_entropy(T.Tensor(z, dtype=np.float64), target).item() >= 0

    def test_empty_valid_region(self):
        with pytest.raises(ValueError):
            cross_entropy(T.Tensor(np.zeros((2, 2, 2))), np.zeros((2, 2), np.uint8), np.zeros((2, 2), np.uint8))


class TestIoU:
    def test_identical(self):
        m = block((4, 4), 0, 0, 2, 2)
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        assert iou(block((4, 4), 0, 0, 2, 2), block((4, 4), 2, 2, 2, 2)) == 0.0

    def test_shifted_blocks(self):
        assert iou(block((4, 4), 0, 0, 2, 2), block((4, 4), 0, 1, 2, 2)) == pytest.approx(1 / 3, abs=0)

    def test_both_empty_undefined(self):
        z = np.zeros((3, 3), np.uint8)
        assert iou(z, z) is None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            iou(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            iou(np.full((2, 2), 2), np.zeros((2, 2)))


class TestBoundaryBand:
    def test_full_grid_exhausts(self):
        m = np.ones((5, 7), np.uint8)
        np.testing.assert_array_equal(boundary_band(m, 3), m.astype(bool))

    def test_single_pixel(self):
        m = block((5, 5), 2, 2, 1, 1)
        np.testing.assert_array_equal(boundary_band(m, 1), m.astype(bool))

    def test_ring(self):
        band = boundary_band(block((8, 8), 1, 1, 6, 6), 1)
        assert band.sum() == 20
        assert not band[2:6, 2:6].any()

    def test_bad_distance(self):
        with pytest.raises(ValueError):
            boundary_band(np.ones((2, 2)), 0)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.integers(0, 1)),
           st.integers(1, 4))
    def test_matches_l1_oracle(self, m, d):
        np.testing.assert_array_equal(boundary_band(m, d), oracles.l1_band(m, d))


class TestBIoU:
    def test_identical(self):
        m = block((8, 8), 1, 1, 6, 6)
        assert biou(m, m, 2) == 1.0

    def test_shifted_square_against_oracle(self):
        a = block((8, 8), 1, 1, 6, 6)
        b = block((8, 8), 1, 2, 6, 6)
        i, u = oracles.counts(oracles.l1_band(a, 1), oracles.l1_band(b, 1))
        assert (i, u) == (10, 30)
        assert biou(a, b, 1) == float(Fraction(i, u))

    @settings(max_examples=40, deadline=None)
    @given(masks16, masks16)
    def test_saturates_to_iou(self, a, b):
        assert biou(a, b, 32) == iou(a, b)

    @settings(max_examples=40, deadline=None)
    @given(masks16, masks16, st.integers(1, 5))
    def test_symmetric_and_bounded(self, a, b, d):
        for f in (lambda x, y: iou(x, y), lambda x, y: biou(x, y, d)):
            v = f(a, b)
            assert v == f(b, a)
            assert v is None or 0.0 <= v <= 1.0

    def test_default_width(self):
        assert default_band_width(256, 256) == 7
        assert default_band_width(4, 4) == 1


class TestConfusionCounts:
    def test_two_pairs(self):
        a = block((4, 4), 0, 0, 2, 2)
        b = block((4, 4), 0, 1, 2, 2)
        c = accumulate(accumulate(ConfusionCounts(), a, b, 1), block((4, 4), 0, 0, 1, 2), block((4, 4), 0, 0, 1, 2), 1)
        assert (c.intersection, c.union) == (4, 8)
        assert c.iou() == 0.5

    def test_single_pair_matches_metric(self):
        rng = np.random.default_rng(5)
        a, b = rng.integers(0, 2, (2, 12, 12)).astype(np.uint8)
        c = accumulate(ConfusionCounts(), a, b, 2)
        assert c.iou() == iou(a, b) and c.biou() == biou(a, b, 2)
        assert c.iou("per-image") == iou(a, b)

    def test_empty_pair_skipped(self):
        z = np.zeros((4, 4), np.uint8)
        c = accumulate(ConfusionCounts(), z, z, 1)
        assert c.samples_skipped == 1 and c.samples == 0 and c.iou() is None

    def test_unknown_averaging(self):
        with pytest.raises(ValueError):
            ConfusionCounts().iou("macro")

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(masks16, masks16), min_size=3, max_size=6), st.randoms(use_true_random=False))
    def test_merge_order_free(self, pairs, rnd):
        parts = [accumulate(ConfusionCounts(), a, b, 2) for a, b in pairs]
        stream = ConfusionCounts()
        for a, b in pairs:
            stream = accumulate(stream, a, b, 2)
        shuffled = parts[:]
        rnd.shuffle(shuffled)
        left = ConfusionCounts()
        for p in shuffled:
            left = left + p
        right = parts[0] + (parts[1] + parts[2])
        for p in parts[3:]:
            right = right + p
        assert left == stream == right
