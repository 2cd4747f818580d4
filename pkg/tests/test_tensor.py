import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmkd import tensor as T
from mmkd.errors import ContractError, DimensionError, StateError
from mmkd.tensor import Tensor


def leaf(a, dtype=np.float32):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += float(a[i, t]) * float(b[t, j])
    return out


def naive_conv(x, k, stride):
    co, ci, kh, kw = k.shape
    _, h, w = x.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                patch = x[:, i * stride:i * stride + kh, j * stride:j * stride + kw].astype(np.float64)
                out[o, i, j] = float(np.sum(patch * k[o].astype(np.float64)))
    return out


class TestMatmul:
    def test_identity(self):
        b = np.arange(6, dtype=np.float32).reshape(3, 2)
        out = T.matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_zero_annihilates(self):
        b = np.random.default_rng(0).normal(size=(2, 2)).astype(np.float32)
        out = T.matmul(Tensor(np.zeros((2, 2), np.float32)), Tensor(b))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_against_triple_loop(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 5)).astype(np.float32)
        b = rng.normal(size=(5, 3)).astype(np.float32)
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-5)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(1, 5, 5)).astype(np.float32)
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_case(self):
        x = Tensor(np.array([[[1, 2], [3, 4]]], np.float32))
        k = Tensor(np.array([[[[1, 0], [0, 1]]]], np.float32))
        np.testing.assert_array_equal(T.conv2d(x, k).data, [[[5.0]]])

    @pytest.mark.parametrize("stride", [1, 2])
    def test_against_direct_loop(self, stride):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 8, 8)).astype(np.float32)
        k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(k), stride).data, naive_conv(x, k, stride), atol=1e-4)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 2, 16, 16)).astype(np.float32)
        k = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
        batched = T.conv2d(Tensor(x), Tensor(k), 2).data
        for i in range(2):
            np.testing.assert_allclose(batched[i], naive_conv(x[i], k, 2), atol=1e-4)

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax_lastdim(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-7)

    def test_known_values(self):
        out = T.softmax_lastdim(Tensor(np.array([1.0, 2.0, 3.0]))).data
        np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=1e-5)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=9), st.floats(-100, 100))
    def test_normalised_and_shift_invariant(self, z, c):
        z = np.array(z, dtype=np.float32)
        p = T.softmax_lastdim(Tensor(z)).data
        assert abs(float(p.sum()) - 1.0) < 1e-6 and np.all(p >= 0)
        np.testing.assert_allclose(T.softmax_lastdim(Tensor(z + np.float32(c))).data, p, atol=1e-6)

    def test_large_logits_stay_finite(self):
        p = T.softmax_lastdim(Tensor(np.array([1e4, 0.0, -1e4], np.float32))).data
        assert np.all(np.isfinite(p))


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.random.default_rng(0).normal(size=(3, 4)))
        T.backward(T.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square(self):
        x = leaf([3.0])
        T.backward(T.tensor_sum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_double_backward_is_state_error(self):
        x = leaf([1.0, 2.0])
        loss = T.tensor_sum(T.mul(x, x))
        T.backward(loss)
        with pytest.raises(StateError):
            T.backward(loss)

    def test_non_scalar_loss(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ContractError):
            T.backward(T.mul(x, x))

    def test_reused_input_accumulates(self):
        x = leaf([2.0])
        y = T.add(T.mul(x, x), x)  # x^2 + x
        T.backward(T.tensor_sum(y))
        np.testing.assert_allclose(x.grad, [5.0])

    def test_dtype_preserved(self):
        x = Tensor(np.ones((2, 2)), dtype=np.float64, requires_grad=True)
        y = T.relu(T.matmul(x, x))
        assert y.dtype == np.float64
        assert T.relu(leaf(np.ones((2, 2)))).dtype == np.float32

    def test_ops_are_pure(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        a = T.conv2d(Tensor(x), Tensor(k), 2).data
        b = T.conv2d(Tensor(x), Tensor(k), 2).data
        assert a.tobytes() == b.tobytes()


def small_net(params):
    h = T.relu(T.conv2d(params["x"], params["k"], 2, params["kb"]))
    h = T.reshape(h, (h.shape[0], -1))
    logits = T.linear(h, params["w"], params["b"])
    picked = T.take_last(T.log_softmax_lastdim(logits), np.array([0, 2]))
    return T.scale(T.tensor_sum(picked), -0.5)


class TestFiniteDiff:
    def test_linear_squared_loss_is_tight(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 3))
        y = rng.normal(size=(4, 2))

        def build(p):
            r = T.sub(T.matmul(Tensor(x, dtype=p["w"].dtype), p["w"]), Tensor(y, dtype=p["w"].dtype))
            return T.tensor_sum(T.mul(r, r))

        rep = T.finite_diff_check(build, {"w": rng.normal(size=(3, 2))}, tolerance=1e-3)
        # float32 autodiff against float64 differences: rounding is the only error source
        assert rep.max_rel_error < 1e-5

    def test_conv_softmax_ce_passes(self):
        rng = np.random.default_rng(1)
        params = {
            "x": rng.normal(size=(2, 2, 7, 7)),
            "k": rng.normal(size=(3, 2, 3, 3)) * 0.5,
            "kb": rng.normal(size=(3,)) * 0.1,
            "w": rng.normal(size=(27, 4)) * 0.3,
            "b": np.zeros(4),
        }
        rep = T.finite_diff_check(small_net, params, tolerance=1e-3)
        assert rep.passed, rep.per_param

    @pytest.mark.parametrize("op", ["conv2d", "matmul", "log_softmax", "relu"])
    def test_injected_fault_is_caught(self, op):
        rng = np.random.default_rng(2)
        params = {
            "x": rng.normal(size=(2, 2, 7, 7)),
            "k": rng.normal(size=(3, 2, 3, 3)) * 0.5,
            "kb": rng.normal(size=(3,)) * 0.1,
            "w": rng.normal(size=(27, 4)) * 0.3,
            "b": np.zeros(4),
        }
        with T.inject_grad_fault(op, 2.0):
            rep = T.finite_diff_check(small_net, params, tolerance=1e-3)
        assert not rep.passed


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b.c": rng.normal(size=(5,)).astype(np.float32)}
    path = tmp_path / "m.ckpt"
    T.save_checkpoint(path, params, {"note": "x"})
    assert path.read_bytes()[:8] == b"MMKDCKPT"
    loaded, meta = T.load_checkpoint(path)
    assert meta["note"] == "x"
    for k in params:
        assert loaded[k].dtype == np.float32
        assert loaded[k].tobytes() == params[k].tobytes()
