import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from buildseg import tensor as T
from buildseg.gradcheck import F32_TOL, F64_TOL, OP_CASES, op_suite

import oracles


def t64(a, grad=False):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def grad_of(fn, *leaves):
    with T.Tape() as tape:
        loss = fn(*leaves)
    T.backward(loss, tape)
    return [leaf.grad for leaf in leaves]


class TestTensor:
    def test_default_dtype_is_32_bit(self):
        assert T.Tensor([1, 2]).dtype == np.float32

    def test_float64_input_keeps_precision(self):
        assert T.Tensor(np.zeros(2)).dtype == np.float64

    def test_item_rejects_non_scalar(self):
        with pytest.raises(T.ShapeError):
            T.Tensor([1.0, 2.0]).item()

    def test_nonfinite_forward_is_an_error(self):
        with np.errstate(over="ignore"), pytest.raises(T.NonFiniteError):
            T.mul(t64([1e300]), t64([1e300]))

    def test_operators_dispatch(self):
        a, b = t64([1, 2]), t64([3, 4])
        np.testing.assert_array_equal((a + b).data, [4, 6])
        np.testing.assert_array_equal((a * b).data, [3, 8])
        np.testing.assert_array_equal((a * 2.0).data, [2, 4])


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(T.add(t64([1, 2]), t64([3, 4])).data, [4, 6])

    def test_scale(self):
        np.testing.assert_array_equal(T.scale(t64([2, 4]), 0.5).data, [1, 2])

    def test_mul_annihilator(self):
        np.testing.assert_array_equal(T.mul(t64([1, 2]), t64([0, 0])).data, [0, 0])

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.add(t64([1, 2]), t64([1, 2, 3]))


class TestMatmul:
    def test_identity(self):
        a = [[1, 2], [3, 4]]
        np.testing.assert_array_equal(T.matmul(t64(np.eye(2)), t64(a)).data, a)

    def test_hand_computed(self):
        out = T.matmul(t64([[1, 2], [3, 4]]), t64([[5], [6]]))
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_zeros(self):
        rng = np.random.default_rng(0)
        out = T.matmul(t64(np.zeros((3, 3))), t64(rng.standard_normal((3, 3))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 3)))

    def test_inner_dim_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax_rows(t64([0, 0, 0])).data, [1 / 3] * 3, atol=1e-15)

    def test_closed_form(self):
        np.testing.assert_allclose(T.softmax_rows(t64([0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)

    def test_no_overflow(self):
        np.testing.assert_array_equal(T.softmax_rows(t64([1000, 1000])).data, [0.5, 0.5])

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
                  elements=st.floats(-50, 50)),
           st.floats(-100, 100))
    def test_rows_are_distributions_and_shift_invariant(self, x, c):
        p = T.softmax_rows(t64(x)).data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
        assert (p > 0).all() and (p <= 1).all()
        np.testing.assert_allclose(T.softmax_rows(t64(x + c)).data, p, atol=1e-7)


class TestLayerNorm:
    def test_constant_slice(self):
        out = T.layer_norm(t64([1, 1, 1]), t64([1, 1, 1]), t64([0, 0, 0]))
        np.testing.assert_array_equal(out.data, [0, 0, 0])

    def test_unit_variance_closed_form(self):
        out = T.layer_norm(t64([-1, 1]), t64([1, 1]), t64([0, 0]), eps=0.0)
        np.testing.assert_allclose(out.data, [-1, 1], atol=1e-15)

    def test_affine_only(self):
        out = T.layer_norm(t64([3, 7]), t64([0, 0]), t64([5, 5]))
        np.testing.assert_array_equal(out.data, [5, 5])


class TestGelu:
    def test_zero(self):
        assert T.gelu(t64([0.0])).data[0] == 0.0

    def test_asymptote(self):
        assert abs(T.gelu(t64([10.0])).data[0] - 10.0) < 1e-4

    def test_against_normal_cdf(self):
        exact = 1.0 * 0.5 * (1 + math.erf(1 / math.sqrt(2)))
        assert abs(T.gelu(t64([1.0])).data[0] - exact) < 1e-3
        assert round(float(T.gelu(t64([1.0])).data[0]), 4) == 0.8412


class TestConv:
    def test_unit_kernel_is_identity(self):
        x = np.random.default_rng(1).standard_normal((1, 5, 6))
        out = T.conv2d(t64(x), t64(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_sum(self):
        out = T.conv2d(t64([[[1, 2], [3, 4]]]), t64(np.ones((1, 1, 2, 2))))
        np.testing.assert_array_equal(out.data, [[[10]]])

    def test_patch_embed_size(self):
        assert T.conv_out_size(256, 7, 4, 3) == 64

    @pytest.mark.parametrize("k", [1, 2, 3, 5])
    @pytest.mark.parametrize("s", [1, 2, 3])
    @pytest.mark.parametrize("p", [0, 1, 2])
    def test_output_shape_sweep(self, k, s, p):
        for H, W in [(k, k + 1), (7, 9), (12, 5)]:
            if (H + 2 * p - k) // s + 1 < 1 or (W + 2 * p - k) // s + 1 < 1:
                continue
            out = T.conv2d(t64(np.zeros((2, H, W))), t64(np.zeros((3, 2, k, k))), s, p)
            assert out.shape == (3, (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1)

    def test_cross_correlation_not_convolution(self):
        x = t64([[[1, 2], [3, 4]]])
        k = t64([[[[1, 0], [0, 0]]]])
        assert T.conv2d(x, k).data.item() == 1.0

    def test_channel_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(t64(np.zeros((2, 4, 4))), t64(np.zeros((1, 3, 1, 1))))

    def test_output_too_small(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(t64(np.zeros((1, 2, 2))), t64(np.zeros((1, 1, 3, 3))))


class TestBilinear:
    def test_same_size_identity(self):
        x = np.random.default_rng(2).standard_normal((2, 5, 7))
        np.testing.assert_array_equal(T.bilinear_resize(t64(x), 5, 7).data, x)

    @pytest.mark.parametrize("size", [(1, 1), (3, 9), (16, 4)])
    def test_constant_preserved(self, size):
        out = T.bilinear_resize(t64(np.full((1, 4, 6), 2.5)), *size).data
        np.testing.assert_allclose(out, 2.5, atol=1e-15)

    def test_half_pixel_upsample(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = T.bilinear_resize(t64(x[None]), 4, 4).data[0]
        np.testing.assert_allclose(out, oracles.bilinear_pixel(x, 4, 4), atol=1e-15)
        assert out[0, 0] == 1.0
        np.testing.assert_allclose(out[1:3, 1:3], [[1.75, 2.25], [2.75, 3.25]], atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_per_pixel_oracle(self, seed):
        rng = np.random.default_rng(seed)
        h, w, oh, ow = (int(v) for v in rng.integers(1, 9, size=4))
        x = rng.standard_normal((h, w))
        np.testing.assert_allclose(T.bilinear_resize(t64(x[None]), oh, ow).data[0],
                                   oracles.bilinear_pixel(x, oh, ow), atol=1e-12)

    def test_affine_exact_in_interior(self):
        yy, xx = np.mgrid[0:8, 0:8].astype(np.float64)
        img = 2 * yy - 3 * xx + 1
        out = T.bilinear_resize(t64(img[None]), 16, 16).data[0]
        sy = (np.arange(16) + 0.5) / 2 - 0.5
        ref = 2 * sy[:, None] - 3 * sy[None, :] + 1
        np.testing.assert_allclose(out[1:-1, 1:-1], ref[1:-1, 1:-1], atol=1e-6)


class TestBackward:
    def test_sum(self):
        w = t64([1, 2, 3], grad=True)
        (g,) = grad_of(T.total, w)
        np.testing.assert_array_equal(g, [1, 1, 1])

    def test_sum_of_squares(self):
        w = t64([1, 2], grad=True)
        (g,) = grad_of(lambda a: T.total(T.mul(a, a)), w)
        np.testing.assert_array_equal(g, [2, 4])

    def test_fan_out_accumulates(self):
        w = t64([1, 2, 3, 4], grad=True)
        (g,) = grad_of(lambda a: T.add(T.total(a), T.total(a)), w)
        np.testing.assert_array_equal(g, [2, 2, 2, 2])

    def test_replay_is_deterministic(self):
        rng = np.random.default_rng(3)
        w = t64(rng.standard_normal((4, 3)), grad=True)
        x = t64(rng.standard_normal((5, 4)))
        with T.Tape() as tape:
            loss = T.total(T.gelu(T.matmul(x, w)))
        T.backward(loss, tape)
        first = w.grad.copy()
        T.backward(loss, tape)
        np.testing.assert_array_equal(first, w.grad)

    def test_tape_is_topologically_ordered(self):
        w = t64([1.0, 2.0], grad=True)
        with T.Tape() as tape:
            T.total(T.scale(T.mul(w, w), 3.0))
        seen = {w.node}
        for rec in tape.records:
            assert all(i in seen for i in rec.inputs)
            seen.add(rec.output)

    def test_non_scalar_loss(self):
        w = t64([1.0, 2.0], grad=True)
        with T.Tape() as tape:
            out = T.scale(w, 2.0)
        with pytest.raises(T.TapeError):
            T.backward(out, tape)

    def test_loss_from_other_tape(self):
        w = t64([1.0], grad=True)
        with T.Tape():
            loss = T.total(w)
        with pytest.raises(T.TapeError):
            T.backward(loss, T.Tape())

    def test_no_record_without_grad(self):
        with T.Tape() as tape:
            T.total(t64([1.0, 2.0]))
        assert tape.records == []


class TestFiniteDiff:
    def test_sum_is_all_ones(self):
        g = T.finite_diff_grad(T.total, t64(np.random.default_rng(4).standard_normal(5)))
        np.testing.assert_allclose(g, 1.0, atol=1e-8)

    def test_square(self):
        g = T.finite_diff_grad(lambda a: T.total(T.mul(a, a)), t64([3.0]), h=1e-5)
        assert abs(g[0] - 6.0) < 1e-6

    def test_constant(self):
        g = T.finite_diff_grad(lambda a: T.Tensor(np.array(4.0), dtype=np.float64), t64([1.0, 2.0]))
        np.testing.assert_array_equal(g, [0, 0])

    def test_bad_step(self):
        with pytest.raises(ValueError):
            T.finite_diff_grad(T.total, t64([1.0]), h=0)


@pytest.mark.parametrize("op", sorted(OP_CASES))
class TestOpGradients:
    """A quick sweep; the acceptance suite runs the full 100 cases per op."""

    def test_64_bit(self, op):
        assert op_suite(8, np.float64, seed=11, ops=[op])[op] <= F64_TOL

    def test_32_bit(self, op):
        assert op_suite(8, np.float32, seed=12, ops=[op])[op] <= F32_TOL
