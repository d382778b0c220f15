import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from compresskit import tensor as T
from compresskit.errors import ContractError, DimensionError, DomainError, ParameterError
from compresskit.tensor import Tensor

import gradcases


def _loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def _loop_conv(x, w, pad):
    c, h, wd = x.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    k = w.shape[-1]
    oh, ow = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((w.shape[0], oh, ow))
    for o in range(w.shape[0]):
        for i in range(oh):
            for j in range(ow):
                s = 0.0
                for ci in range(c):
                    for di in range(k):
                        for dj in range(k):
                            s += xp[ci, i + di, j + dj] * w[o, ci, di, dj]
                out[o, i, j] = s
    return out


class TestTensorType:
    def test_shape_and_data_agree(self):
        t = Tensor(np.arange(6.0).reshape(2, 3))
        assert t.shape == (2, 3)
        assert t.size == math.prod(t.shape)
        assert t.data.dtype == np.float64

    def test_zero_dimension_rejected(self):
        with pytest.raises(DimensionError):
            Tensor(np.zeros((0, 3)))

    def test_item_requires_single_element(self):
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0]).item()

    def test_grad_shape_matches_data(self):
        x = Tensor(np.ones((2, 3)), True)
        T.backward(T.tsum(T.square(x)))
        assert x.grad.shape == x.shape


class TestMatmul:
    def test_identity(self):
        out = T.matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]])
        assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projector(self):
        out = T.matmul([[1.0, 0.0], [0.0, 0.0]], [[5.0, 6.0], [7.0, 8.0]])
        assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_reference_product(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        assert_array_equal(T.matmul(a, b).data, _loop_matmul(a, b))
        assert_array_equal(T.matmul(a, b).data, [[19, 22], [43, 50]])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).uniform(size=(1, 1, 5, 5))
        out = T.conv2d(x, np.ones((1, 1, 1, 1)))
        assert_array_equal(out.data, x)

    def test_constant_image_interior(self):
        c = 0.37
        out = T.conv2d(np.full((1, 1, 5, 5), c), np.ones((1, 1, 3, 3)), padding=1)
        assert_allclose(out.data[0, 0, 1:-1, 1:-1], 9 * c, rtol=0, atol=1e-15)

    def test_matches_nested_loops(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 4, 4))
        w = rng.normal(size=(1, 1, 3, 3))
        out = T.conv2d(x[None], w, padding=1)
        assert_allclose(out.data[0], _loop_conv(x, w, 1), rtol=0, atol=1e-14)

    def test_stride_two_subsamples(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        full = T.conv2d(x, w, stride=1, padding=1).data
        assert_allclose(T.conv2d(x, w, stride=2, padding=1).data, full[:, :, ::2, ::2], atol=1e-14)


class TestPooling:
    def test_global_avg_pool_constants(self):
        out = T.global_avg_pool(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert_allclose(out.data.reshape(-1), [2.5])

    def test_global_avg_pool_constant_channel(self):
        out = T.global_avg_pool(np.full((1, 2, 3, 3), -1.25))
        assert_allclose(out.data.reshape(-1), [-1.25, -1.25])

    def test_global_avg_pool_summation_oracle(self):
        x = np.random.default_rng(5).normal(size=(1, 3, 4, 4))
        expected = [sum(x[0, c, i, j] for i in range(4) for j in range(4)) / 16 for c in range(3)]
        assert_allclose(out := T.global_avg_pool(x).data.reshape(-1), expected, atol=1e-15)
        assert out.shape == (3,)

    def test_max_pool(self):
        out = T.max_pool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
        assert out.data.item() == 4.0


class TestActivations:
    def test_relu(self):
        assert_array_equal(T.relu([-1.0, 0.0, 2.0]).data, [0, 0, 2])

    def test_relu_grad_at_zero_is_zero(self):
        x = Tensor([0.0], True)
        T.backward(T.tsum(T.relu(x)))
        assert x.grad[0] == 0.0

    def test_sigmoid_symmetry_point(self):
        assert T.sigmoid([0.0]).data[0] == 0.5

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid([-1000.0, 1000.0]).data
        assert np.all(np.isfinite(out))
        assert_allclose(out, [0.0, 1.0])


class TestSoftmax:
    def test_uniform_for_equal_logits(self):
        for temp in (0.1, 1.0, 7.0):
            assert_allclose(T.softmax_with_temperature([2.0, 2.0, 2.0], temp).data, [1 / 3] * 3, atol=1e-15)

    def test_temperature_two(self):
        out = T.softmax_with_temperature([2.0, 0.0], 2.0).data
        assert_allclose(out, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-12)
        assert_allclose(out, [0.7311, 0.2689], atol=1e-4)

    def test_infinite_temperature_limit(self):
        out = T.softmax_with_temperature([5.0, 1.0, -3.0], 1e8).data
        assert np.all(np.abs(out - 1 / 3) < 1e-6)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ParameterError):
            T.softmax_with_temperature([1.0, 2.0], 0.0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(1e-2, 1e3))
    def test_sums_to_one_and_keeps_argmax(self, logits, temp):
        logits = np.array(logits)
        out = T.softmax_with_temperature(logits, temp).data
        assert abs(out.sum() - 1.0) <= 1e-12
        top = np.flatnonzero(logits == logits.max())
        assert out[top[0]] == out.max()


class TestKlDivergence:
    def test_identical_is_zero(self):
        p = np.array([0.2, 0.3, 0.5])
        assert T.kl_divergence(p, p).item() == 0.0

    def test_reference_values(self):
        expected = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
        assert_allclose(T.kl_divergence([0.5, 0.5], [0.25, 0.75]).item(), expected, atol=1e-15)
        assert_allclose(T.kl_divergence([0.5, 0.5], [0.25, 0.75]).item(), 0.1438, atol=1e-4)
        assert_allclose(T.kl_divergence([1.0, 0.0], [0.5, 0.5]).item(), math.log(2), atol=1e-15)

    def test_invalid_distribution(self):
        with pytest.raises(DomainError):
            T.kl_divergence([0.6, 0.6], [0.5, 0.5])
        with pytest.raises(DomainError):
            T.kl_divergence([0.5, 0.5], [1.0, 0.0])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2**32 - 1))
    def test_nonnegative_and_zero_only_on_equality(self, k, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(k))
        q = rng.dirichlet(np.ones(k))
        value = T.kl_divergence(p, q).item()
        assert value >= 0.0
        if not np.array_equal(p, q):
            assert value > 0.0
        assert abs(T.kl_divergence(p, p).item()) <= 1e-12


class TestCrossEntropy:
    def test_perfect_prediction(self):
        assert T.cross_entropy([0.0, 1.0, 0.0], [0.0, 1.0, 0.0]).item() == 0.0

    def test_half_half(self):
        assert_allclose(T.cross_entropy([0.5, 0.5], [1.0, 0.0]).item(), math.log(2), atol=1e-6)

    def test_smoothed_target(self):
        target = T.label_smooth(0, 2, 0.1).distribution
        expected = -(0.95 * math.log(0.9) + 0.05 * math.log(0.1))
        assert_allclose(T.cross_entropy([0.9, 0.1], target).item(), expected, atol=1e-12)


class TestLabelSmoothing:
    def test_zero_smoothing(self):
        assert_array_equal(T.label_smooth(1, 3, 0.0).distribution, [0, 1, 0])

    def test_four_classes(self):
        assert_allclose(T.label_smooth(2, 4, 0.1).distribution, [0.025, 0.025, 0.925, 0.025], atol=1e-15)

    def test_half(self):
        assert_allclose(T.label_smooth(0, 2, 0.5).distribution, [0.75, 0.25], atol=1e-15)

    @pytest.mark.parametrize("args", [(3, 3, 0.1), (-1, 3, 0.1), (0, 1, 0.1), (0, 3, 1.0), (0, 3, -0.1)])
    def test_invalid_arguments(self, args):
        with pytest.raises(ParameterError):
            T.label_smooth(*args)

    @settings(max_examples=300, deadline=None)
    @given(st.integers(2, 20).flatmap(lambda k: st.tuples(st.just(k), st.integers(0, k - 1))),
           st.floats(0.0, 0.999, exclude_max=False))
    def test_invariants(self, ky, alpha):
        k, y = ky
        label = T.label_smooth(y, k, alpha)
        d = label.distribution
        assert abs(d.sum() - 1.0) <= 1e-12
        assert np.argmax(d) == y
        if alpha > 0:
            assert d.min() == alpha / k


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)), True)
        T.backward(T.tsum(w))
        assert_array_equal(w.grad, np.ones((2, 3, 4)))

    def test_sigmoid_derivative_at_zero(self):
        x = Tensor([0.0], True)
        T.backward(T.tsum(T.sigmoid(x)))
        assert_allclose(x.grad, [0.25], atol=1e-10)

    def test_tape_is_reset_after_backward(self):
        x = Tensor([1.0, 2.0], True)
        T.backward(T.tsum(T.mul(x, x)))
        assert len(T.active_tape()) == 0

    def test_gradients_accumulate_over_reuse(self):
        x = Tensor([3.0], True)
        T.backward(T.tsum(T.add(T.mul(x, 2.0), T.mul(x, x))))
        assert_allclose(x.grad, [2.0 + 6.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], True)
        with T.no_grad():
            T.exp(x)
        assert len(T.active_tape()) == 0

    def test_determinism(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        a = T.relu(T.conv2d(x, w, padding=1)).data
        b = T.relu(T.conv2d(x.copy(), w.copy(), padding=1)).data
        assert a.tobytes() == b.tobytes()


class TestGradientSuite:
    @pytest.mark.parametrize("name", sorted(gradcases.PRIMITIVES))
    def test_primitive(self, name):
        worst = max(gradcases.check(name, seed) for seed in range(10))
        assert worst < gradcases.TOL

    @pytest.mark.parametrize("name", sorted(gradcases.COMPOSITES))
    def test_composite(self, name):
        worst = max(gradcases.check(name, seed) for seed in range(10))
        assert worst < gradcases.TOL


class TestSerialization:
    def test_roundtrip_bitwise(self, tmp_path):
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 4)))
        T.save_tensor(tmp_path / "x.ckt", x)
        y = T.load_tensor(tmp_path / "x.ckt")
        assert y.data.tobytes() == x.data.tobytes()

    def test_header_layout(self, tmp_path):
        T.save_tensor(tmp_path / "x.ckt", Tensor(np.arange(6.0).reshape(2, 3)))
        blob = (tmp_path / "x.ckt").read_bytes()
        assert blob[:4] == b"CKT1"
        assert int.from_bytes(blob[4:12], "little") == 2
        assert int.from_bytes(blob[12:20], "little") == 2
        assert int.from_bytes(blob[20:28], "little") == 3
        assert_array_equal(np.frombuffer(blob[28:], "<f8"), np.arange(6.0))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.ckt").write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(ValueError):
            T.load_tensor(tmp_path / "bad.ckt")
