import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tisr import tensor as tt
from tisr.optim import AdamState, adam_step
from tisr.rng import stream
from tisr.tensor import ShapeError, Tensor


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def rand(rng, *shape):
    return leaf(rng.standard_normal(shape))


class TestMatmul:
    def test_identity(self):
        out = tt.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_row_sum(self):
        out = tt.matmul(Tensor([[1, 2, 3]]), Tensor([[1], [1], [1]]))
        np.testing.assert_array_equal(out.data, [[6]])

    def test_gradient(self):
        rng = np.random.default_rng(0)
        a, b = rand(rng, 3, 4), rand(rng, 4, 2)
        err = tt.finite_diff_check(lambda xs: (tt.matmul(xs[0], xs[1]) ** 2).sum(), [a, b])
        assert err < 1e-7

    def test_batched_broadcast_gradient(self):
        rng = np.random.default_rng(1)
        a, b = rand(rng, 2, 3, 4), rand(rng, 1, 4, 2)
        err = tt.finite_diff_check(lambda xs: tt.exp(tt.matmul(xs[0], xs[1]) * 0.3).sum(), [a, b])
        assert err < 1e-7

    def test_shape_error_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            tt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(tt.softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_no_overflow(self):
        out = tt.softmax_lastdim(Tensor([1000.0, 0.0])).data
        assert out[0] == 1.0 and 0 <= out[1] < 1e-300

    def test_against_high_precision(self):
        mpmath.mp.dps = 30
        es = [mpmath.exp(v) for v in (1, 2, 3)]
        expected = [float(e / sum(es)) for e in es]
        out = tt.softmax_lastdim(Tensor([1.0, 2.0, 3.0])).data
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)
        np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=5e-6)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_rows_are_distributions_and_shift_invariant(self, x, c):
        s = tt.softmax_lastdim(Tensor(x)).data
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(tt.softmax_lastdim(Tensor(x + c)).data, s, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x = rand(rng, 3, 4)
        w = rng.standard_normal((3, 4))
        assert tt.finite_diff_check(lambda xs: (tt.softmax_lastdim(xs[0]) * w).sum(), [x]) < 1e-6

    def test_log_softmax_gradient(self):
        rng = np.random.default_rng(3)
        x = rand(rng, 2, 5)
        w = rng.standard_normal((2, 5))
        assert tt.finite_diff_check(lambda xs: (tt.log_softmax_lastdim(xs[0]) * w).sum(), [x]) < 1e-6


class TestGelu:
    @pytest.mark.parametrize("x", [0.0, 1.0, -1.0, 2.5, -3.0])
    def test_erf_oracle(self, x):
        mpmath.mp.dps = 30
        expected = float(mpmath.mpf(x) * (1 + mpmath.erf(mpmath.mpf(x) / mpmath.sqrt(2))) / 2)
        assert tt.gelu(Tensor(x)).item() == pytest.approx(expected, abs=1e-15)

    def test_reference_values(self):
        assert tt.gelu(Tensor(0.0)).item() == 0.0
        assert tt.gelu(Tensor(1.0)).item() == pytest.approx(0.841345, abs=5e-7)
        assert tt.gelu(Tensor(-1.0)).item() == pytest.approx(-0.158655, abs=5e-7)

    def test_gradient(self):
        x = leaf(np.linspace(-3, 3, 11))
        assert tt.finite_diff_check(lambda xs: tt.gelu(xs[0]).sum(), [x]) < 1e-6


class TestDropout:
    def test_zero_rate_is_identity(self):
        x = Tensor(np.arange(6.0))
        assert tt.dropout(x, 0.0, True, stream(0, "d")) is x

    def test_eval_mode_is_identity(self):
        x = Tensor(np.arange(6.0))
        np.testing.assert_array_equal(tt.dropout(x, 0.5, False, None).data, x.data)

    def test_mean_preserved(self):
        out = tt.dropout(Tensor(np.ones(100_000)), 0.5, True, stream(0, "dropout")).data
        assert abs(out.mean() - 1.0) < 0.02
        assert set(np.unique(out)) <= {0.0, 2.0}

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_rejects_bad_rate(self, p):
        with pytest.raises(ValueError):
            tt.dropout(Tensor([1.0]), p, True, stream(0, "d"))

    def test_same_seed_same_mask(self):
        a = tt.dropout(Tensor(np.ones(1000)), 0.3, True, stream(7, "dropout")).data
        b = tt.dropout(Tensor(np.ones(1000)), 0.3, True, stream(7, "dropout")).data
        assert a.tobytes() == b.tobytes()

    def test_streams_are_independent(self):
        a = stream(7, "dropout").random(5)
        stream(7, "init").random(100)
        b = stream(7, "dropout").random(5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, stream(7, "init").random(5))


class TestAffine:
    def test_zero(self):
        out = tt.affine(Tensor(np.ones((2, 3))), Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((2, 5, 3))
        out = tt.affine(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x, W, b = rand(rng, 2, 3), rand(rng, 3, 4), rand(rng, 4)
        err = tt.finite_diff_check(lambda xs: (tt.affine(*xs) ** 2).sum(), [x, W, b])
        assert err < 1e-7

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            tt.affine(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 4))))


class TestConcatSeq:
    def test_empty_prefix(self):
        b = np.random.default_rng(0).standard_normal((2, 3, 4))
        out = tt.concat_seq(Tensor(np.zeros((2, 0, 4))), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_small(self):
        out = tt.concat_seq(Tensor([[[1.0, 2.0]]]), Tensor([[[3.0, 4.0]]]))
        np.testing.assert_array_equal(out.data, [[[1, 2], [3, 4]]])

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            tt.concat_seq(Tensor(np.ones((2, 1, 3))), Tensor(np.ones((2, 1, 4))))

    def test_gradient(self):
        rng = np.random.default_rng(5)
        a, b = rand(rng, 2, 2, 3), rand(rng, 2, 3, 3)
        w = rng.standard_normal((2, 5, 3))
        assert tt.finite_diff_check(lambda xs: (tt.concat_seq(*xs) ** 2 * w).sum(), [a, b]) < 1e-6

    def test_gradient_routing(self):
        # weight only the second block: all gradient must land on b, none on a
        a, b = leaf(np.ones((1, 2, 2))), leaf(np.ones((1, 3, 2)))
        w = np.zeros((1, 5, 2))
        w[:, 2:] = np.arange(6.0).reshape(1, 3, 2)
        tt.backward((tt.concat_seq(a, b) * w).sum())
        np.testing.assert_array_equal(a.grad, 0.0)
        np.testing.assert_array_equal(b.grad, w[:, 2:])


class TestPoolNormalize:
    def test_single_position(self):
        x = np.random.default_rng(0).standard_normal((2, 1, 3))
        np.testing.assert_array_equal(tt.mean_pool_seq(Tensor(x)).data, x[:, 0])

    def test_345(self):
        np.testing.assert_allclose(tt.l2_normalize(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-15)

    def test_unit_norm_random(self):
        x = np.random.default_rng(1).standard_normal((50, 7)) * 10
        n = np.linalg.norm(tt.l2_normalize(Tensor(x)).data, axis=1)
        np.testing.assert_allclose(n, 1.0, atol=1e-9)

    def test_zero_row(self):
        with pytest.raises(ValueError):
            tt.l2_normalize(Tensor([[0.0, 0.0], [1.0, 0.0]]))

    def test_masked_pool(self):
        x = Tensor(np.arange(12.0).reshape(1, 4, 3))
        out = tt.mean_pool_seq(x, np.array([[1, 1, 0, 0]])).data
        np.testing.assert_allclose(out, [[1.5, 2.5, 3.5]])

    def test_gradients(self):
        rng = np.random.default_rng(6)
        x = rand(rng, 2, 4, 3)
        w = rng.standard_normal((2, 3))
        f = lambda xs: (tt.l2_normalize(tt.mean_pool_seq(xs[0], np.array([[1, 1, 1, 0], [1, 0, 0, 0]]))) * w).sum()
        assert tt.finite_diff_check(f, [x]) < 1e-6


class TestOtherOps:
    def test_layer_norm_gradient(self):
        rng = np.random.default_rng(7)
        x, g, b = rand(rng, 2, 3, 5), rand(rng, 5), rand(rng, 5)
        w = rng.standard_normal((2, 3, 5))
        assert tt.finite_diff_check(lambda xs: (tt.layer_norm(*xs) * w).sum(), [x, g, b]) < 1e-6

    def test_embedding_gradient(self):
        rng = np.random.default_rng(8)
        table = rand(rng, 6, 3)
        ids = np.array([[0, 2, 2], [5, 0, 1]])
        w = rng.standard_normal((2, 3, 3))
        assert tt.finite_diff_check(lambda xs: (tt.embedding(xs[0], ids) ** 2 * w).sum(), [table]) < 1e-6

    def test_take_last_and_getitem(self):
        rng = np.random.default_rng(9)
        x = rand(rng, 2, 3, 4)
        ids = np.array([[0, 3, 1], [2, 2, 0]])
        f = lambda xs: (tt.take_last(xs[0], ids) ** 2).sum() + (xs[0][:, 1:, ::2] ** 3).sum()
        assert tt.finite_diff_check(f, [x]) < 1e-6

    def test_arith_broadcast(self):
        rng = np.random.default_rng(10)
        a, b = rand(rng, 2, 3), leaf(rng.uniform(1, 2, size=(1, 3)))
        f = lambda xs: ((xs[0] - xs[1]) * xs[0] / xs[1] + tt.log(xs[1]) + tt.sqrt(xs[1])).sum()
        assert tt.finite_diff_check(f, [a, b]) < 1e-6

    def test_masked_fill(self):
        x = leaf([1.0, 2.0, 3.0])
        out = tt.masked_fill(x, np.array([False, True, False]), -np.inf)
        assert out.data[1] == -np.inf
        tt.backward(tt.softmax_lastdim(out)[0])
        assert x.grad[1] == 0.0


class TestBackward:
    def test_sum(self):
        x = leaf(np.arange(5.0))
        tt.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones(5))

    def test_square(self):
        x = leaf([1.0, 2.0])
        tt.backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ShapeError):
            tt.backward(x * 2)

    def test_shared_subgraph_visited_once(self):
        x = leaf([3.0])
        y = x * x
        tt.backward((y + y).sum())
        np.testing.assert_array_equal(x.grad, [12.0])

    def test_deep_chain_no_recursion_limit(self):
        x = leaf([1.0])
        y = x
        for _ in range(5000):
            y = y * 1.0
        tt.backward(y.sum())
        assert x.grad[0] == 1.0

    def test_no_grad(self):
        x = leaf([1.0])
        with tt.no_grad():
            y = x * 2
        assert not y.requires_grad

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_debug_mode_flags_nonfinite(self):
        tt.set_debug(True)
        try:
            with pytest.raises(FloatingPointError):
                tt.log(Tensor([-1.0]))
        finally:
            tt.set_debug(False)


class TestAdam:
    def test_zero_gradient(self):
        p = leaf([1.0, -2.0])
        adam_step([p], [np.zeros(2)], AdamState(lr=0.1))
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_moves_lr(self):
        p = leaf([0.0])
        st_ = AdamState(lr=0.1)
        adam_step([p], [np.ones(1)], st_)
        # m_hat / sqrt(v_hat) = 1 exactly after bias correction, up to eps
        assert p.data[0] == pytest.approx(-0.1, abs=1e-8)
        assert st_.t == 1

    def test_converges_on_quadratic(self):
        x = leaf([0.0])
        state = AdamState(lr=0.1)
        for _ in range(500):
            x.grad = None
            tt.backward(((x - 3.0) ** 2).sum())
            adam_step([x], [x.grad], state)
        assert abs(x.data[0] - 3.0) < 1e-3
        assert state.t == 500

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step([leaf([0.0, 1.0])], [np.ones(3)], AdamState())
