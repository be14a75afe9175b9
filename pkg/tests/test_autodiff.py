"""Tensor primitives and reverse-mode gradients."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from absolutenet import autodiff as ad
from absolutenet.autodiff import ShapeError, Tape, Tensor
from absolutenet.gradcheck import KINK_TOLERANCE, registry, run_checks

PRIMITIVES = [n for n in registry(ad.make_rng(0)) if not n.startswith("model_")]


def grad_of(fn, value):
    tape = Tape()
    x = tape.variable(np.asarray(value, dtype=np.float64))
    return tape.gradient(ad.mean(fn(x)) if x.ndim else fn(x), [x])[0]


class TestTensor:
    def test_shape_and_size_agree(self):
        t = Tensor(np.zeros((2, 3)))
        assert t.shape == (2, 3) and t.data.size == 6

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_default_precision_is_32_bit(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32
        assert Tensor(np.array([1, 2])).dtype == np.float32

    def test_float64_arrays_keep_precision(self):
        assert Tensor(np.ones(2)).dtype == np.float64

    def test_python_scalars_keep_tensor_precision(self):
        assert ad.add(Tensor(np.ones(2, np.float32)), 1.5).dtype == np.float32
        assert ad.mul(Tensor(np.ones(2)), 2).dtype == np.float64

    def test_seeded_streams_repeat(self):
        a = ad.make_rng(9).standard_normal(5)
        b = ad.make_rng(9).standard_normal(5)
        np.testing.assert_array_equal(a, b)
        assert ad.derive_seed(3, 1) != ad.derive_seed(3, 2)


class TestConv2d:
    def test_spatial_kernel_collapses_channels(self, rng):
        out = ad.conv2d(rng.standard_normal((28, 150, 1)), rng.standard_normal((28, 1, 1, 40)), "valid")
        assert out.shape == (1, 150, 40)

    def test_temporal_kernel_valid(self, rng):
        out = ad.conv2d(rng.standard_normal((28, 150, 1)), rng.standard_normal((1, 5, 1, 20)), "valid")
        assert out.shape == (28, 146, 20)

    def test_all_ones(self):
        out = ad.conv2d(np.ones((2, 2, 1)), np.ones((2, 2, 1, 1)), "valid")
        assert out.shape == (1, 1, 1)
        assert out.item() == 4.0

    def test_same_padding_keeps_size(self, rng):
        out = ad.conv2d(rng.standard_normal((3, 8, 2)), rng.standard_normal((2, 4, 2, 5)), "same")
        assert out.shape == (3, 8, 5)

    def test_same_padding_puts_extra_zero_at_the_end(self):
        # kernel width 2 pads (0, 1): the last output only sees the last input
        x = np.arange(1.0, 5.0).reshape(1, 4, 1)
        k = np.ones((1, 2, 1, 1))
        np.testing.assert_allclose(ad.conv2d(x, k, "same").data.ravel(), [3, 5, 7, 4])
        assert ad.pad_amounts(4, 2, "same") == (0, 1)
        assert ad.pad_amounts(4, 3, "same") == (1, 1)

    def test_matches_direct_triple_sum(self, rng):
        x = rng.standard_normal((4, 6, 2))
        k = rng.standard_normal((2, 3, 2, 3))
        out = ad.conv2d(x, k, "valid").data
        ref = np.zeros((3, 4, 3))
        for i in range(3):
            for j in range(4):
                for o in range(3):
                    ref[i, j, o] = np.sum(x[i:i + 2, j:j + 3, :] * k[..., o])
        np.testing.assert_allclose(out, ref, rtol=1e-10)

    def test_kernel_larger_than_input(self, rng):
        with pytest.raises(ShapeError, match="kernel"):
            ad.conv2d(rng.standard_normal((2, 5, 1)), rng.standard_normal((3, 1, 1, 1)), "valid")

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ad.conv2d(rng.standard_normal((2, 5, 2)), rng.standard_normal((1, 1, 3, 1)))

    def test_unknown_padding(self, rng):
        with pytest.raises(ValueError):
            ad.conv2d(rng.standard_normal((2, 5, 1)), rng.standard_normal((1, 1, 1, 1)), "full")

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**31))
    def test_linearity(self, a, b, seed):
        r = ad.make_rng(seed)
        X, Z = r.standard_normal((2, 3, 7, 2)), r.standard_normal((2, 3, 7, 2))
        K = r.standard_normal((2, 3, 2, 4))
        lhs = ad.conv2d(a * X + b * Z, K, "same").data
        rhs = a * ad.conv2d(X, K, "same").data + b * ad.conv2d(Z, K, "same").data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5 * (1 + np.abs(rhs).max()))


class TestSeparable:
    def test_parameter_count_of_fusion_block(self):
        dw, pw = np.zeros((1, 3, 120)), np.zeros((120, 10))
        assert dw.size + pw.size == 1560

    def test_identity_case(self, rng):
        x = rng.standard_normal((1, 8, 3))
        out = ad.separable_conv2d(x, np.ones((1, 1, 3)), np.eye(3), "same")
        np.testing.assert_allclose(out.data, x)

    def test_equals_expanded_full_convolution(self, rng):
        x = rng.standard_normal((1, 8, 3))
        dw, pw = rng.standard_normal((1, 3, 3)), rng.standard_normal((3, 4))
        full = dw[..., :, None] * pw[None, None, :, :]   # rank-1 expansion per input feature
        for padding in ("valid", "same"):
            np.testing.assert_allclose(ad.separable_conv2d(x, dw, pw, padding).data,
                                       ad.conv2d(x, full, padding).data, atol=1e-6)

    def test_depthwise_feature_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ad.depthwise_conv2d(rng.standard_normal((1, 8, 3)), rng.standard_normal((1, 3, 2)))


class TestBackward:
    def test_square_at_three(self):
        assert grad_of(ad.square, 3.0) == 6.0

    def test_abs_subgradient_at_zero(self):
        assert grad_of(ad.abs_, 0.0) == 0.0

    def test_abs_sign_matches_one_sided_differences(self):
        h = 1e-3
        for x0 in (h, -h):
            fd = (abs(x0 + h / 10) - abs(x0 - h / 10)) / (2 * h / 10)
            assert grad_of(ad.abs_, x0) == pytest.approx(fd)

    def test_log_abs_gradient_at_zero(self):
        assert grad_of(lambda x: ad.log_abs_eps(x, 1e-7), 0.0) == 0.0

    def test_unused_leaves_get_zeros(self):
        tape = Tape()
        x, unused = tape.variable(np.array([2.0])), tape.variable(np.ones((2, 2)))
        grads = ad.backward(tape, ad.mean(ad.square(x)))
        np.testing.assert_array_equal(grads[unused.node], np.zeros((2, 2)))
        assert grads[x.node][0] == 4.0

    def test_non_scalar_output_rejected(self):
        tape = Tape()
        x = tape.variable(np.ones(3))
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(tape, ad.square(x))

    def test_nodes_are_topological(self, rng):
        tape = Tape()
        x = tape.variable(rng.standard_normal((2, 3)))
        ad.mean(ad.mul(ad.exp(x), ad.square(x)))
        for i, node in enumerate(tape.nodes):
            assert all(j < i for j in node[1])

    def test_replay_gives_identical_gradients(self, rng):
        tape = Tape()
        x = tape.variable(rng.standard_normal((3, 4)))
        w = tape.variable(rng.standard_normal((4, 2)))
        loss = ad.mean(ad.square(ad.matmul(x, w)))
        first = ad.backward(tape, loss)
        second = ad.backward(tape, loss)
        for k in first:
            np.testing.assert_array_equal(first[k], second[k])

    def test_shared_subexpression_accumulates(self):
        tape = Tape()
        x = tape.variable(np.array([1.5]))
        y = ad.mul(x, x)                      # x used twice
        assert tape.gradient(ad.mean(y), [x])[0][0] == pytest.approx(3.0)

    def test_untracked_inputs_are_not_recorded(self):
        tape = Tape()
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(2)))
        assert len(tape) == 0


class TestElementwise:
    def test_definitions(self):
        assert ad.square(Tensor([-3.0])).item() == 9.0
        assert ad.abs_(Tensor([-2.0])).item() == 2.0

    def test_log_abs_near_identity(self):
        v = ad.log_abs_eps(Tensor(np.array([1.0])), 1e-7).item()
        assert v == pytest.approx(np.log1p(1e-7), rel=1e-9)

    def test_log_abs_finite_at_zero(self):
        assert np.isfinite(ad.log_abs_eps(Tensor(np.zeros(3)), 1e-7).data).all()

    def test_concat_feature_axis(self, rng):
        a, b = rng.standard_normal((1, 146, 60)), rng.standard_normal((1, 146, 60))
        assert ad.concat([a, b], axis=-1).shape == (1, 146, 120)

    def test_concat_extent_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ad.concat([rng.standard_normal((1, 4, 2)), rng.standard_normal((1, 5, 2))], axis=-1)

    def test_concat_axis_out_of_range(self, rng):
        with pytest.raises(ShapeError):
            ad.concat([rng.standard_normal((1, 4)), rng.standard_normal((1, 4))], axis=3)

    def test_broadcast_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ad.add(rng.standard_normal((3, 4)), rng.standard_normal((3,)))

    def test_matmul_inner_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ad.matmul(rng.standard_normal((3, 4)), rng.standard_normal((5, 2)))

    def test_reshape_size_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ad.reshape(rng.standard_normal((3, 4)), (5, 2))

    def test_variance_is_population(self, rng):
        x = rng.standard_normal((4, 7))
        np.testing.assert_allclose(ad.variance(Tensor(x), axis=-1).data, x.var(axis=-1))

    def test_normalize_matches_composed_route(self, rng):
        x = Tensor(rng.standard_normal((3, 2, 6)))
        composed = ad.mul(ad.sub(x, ad.mean(x, -1, keepdims=True)),
                          ad.rsqrt(ad.add(ad.variance(x, -1, keepdims=True), 1e-5)))
        np.testing.assert_allclose(ad.normalize(x, -1, 1e-5).data, composed.data, rtol=1e-10)


@pytest.mark.parametrize("name", PRIMITIVES)
def test_finite_difference_agreement(name):
    (res,) = run_checks([name])
    assert res.passed, f"{name}: {res.max_rel_error:.2e} >= {res.tolerance}"


def test_kink_checks_stay_outside_excluded_band():
    reg = registry(ad.make_rng(0))
    for name in ("abs_near_kink", "log_abs_near_kink"):
        fn, (x,), tol = reg[name]()
        assert np.abs(x).min() >= 1e-3 and tol == KINK_TOLERANCE


def test_single_threaded_determinism(rng):
    x = rng.standard_normal((2, 3, 9, 2)).astype(np.float32)
    k = rng.standard_normal((3, 2, 2, 4)).astype(np.float32)
    a = ad.conv2d(x, k, "same").data
    b = ad.conv2d(x.copy(), k.copy(), "same").data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    p = ad.softmax(Tensor(x)).data
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
