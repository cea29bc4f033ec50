import numpy as np
import pytest

from busseg.tensor import (
    Adam,
    BNState,
    NumericError,
    RngStream,
    ShapeError,
    Tensor,
    activation,
    batch_norm,
    concat,
    conv2d,
    conv_out_size,
    conv_transpose2d,
    dropout,
    no_grad,
    pad2d,
    softmax,
)

from oracles import (
    brute_conv2d,
    brute_conv_transpose2d,
    brute_valid_positions,
    gradcheck,
    max_rel_err,
)


class TestConvShapes:
    def test_paper_layer_geometry(self):
        x = Tensor(np.zeros((1, 1, 96, 96), dtype=np.float32))
        w = Tensor(np.zeros((64, 1, 4, 4), dtype=np.float32))
        assert conv2d(x, w, stride=2, pad=1).shape == (1, 64, 48, 48)

    def test_identity_kernel(self):
        x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
        w = Tensor(np.ones((1, 1, 1, 1)))
        out = conv2d(x, w, stride=1, pad=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_dilated_size_example(self):
        # H=12, k=3, dilation=6, stride=2, pad=6
        assert conv_out_size(12, 3, 2, 6, 6) == 6

    def test_size_formula_matches_enumeration(self):
        for h in range(1, 17):
            for k in range(1, 6):
                for s in range(1, 4):
                    for p in range(0, 7):
                        for d in range(1, 10):
                            expected = brute_valid_positions(h, k, s, p, d)
                            if expected == 0:
                                with pytest.raises(ShapeError):
                                    conv_out_size(h, k, s, p, d)
                            else:
                                assert conv_out_size(h, k, s, p, d) == expected, \
                                    (h, k, s, p, d)

    def test_channel_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((1, 3, 8, 8)))
        w = Tensor(np.zeros((4, 2, 3, 3)))
        with pytest.raises(ShapeError, match=r"\(1, 3, 8, 8\).*\(4, 2, 3, 3\)"):
            conv2d(x, w)


class TestConvValues:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_nested_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n, c, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        h = int(rng.integers(4, 10))
        kh = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, 3))
        d = int(rng.integers(1, 3))
        if h + 2 * p < d * (kh - 1) + 1:
            p = d * kh  # keep geometry valid
        x = rng.standard_normal((n, c, h, h))
        w = rng.standard_normal((k, c, kh, kh))
        b = rng.standard_normal(k)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=s, pad=p, dilation=d)
        ref = brute_conv2d(x, w, b, s, p, d)
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_transpose_matches_scatter_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        n, c, k = 2, 3, 2
        h = int(rng.integers(2, 6))
        s = int(rng.integers(1, 3))
        kh = int(rng.integers(2, 5))
        p = int(rng.integers(0, min(2, (kh - 1))))
        if (h - 1) * s - 2 * p + kh <= 0:
            p = 0
        x = rng.standard_normal((n, c, h, h))
        w = rng.standard_normal((c, k, kh, kh))
        b = rng.standard_normal(k)
        out = conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride=s, pad=p)
        ref = brute_conv_transpose2d(x, w, b, s, p)
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_transpose_size_examples(self):
        x = Tensor(np.zeros((1, 512, 1, 1), dtype=np.float32))
        w = Tensor(np.zeros((512, 256, 4, 4), dtype=np.float32))
        assert conv_transpose2d(x, w, stride=2, pad=1).shape == (1, 256, 2, 2)
        x = Tensor(np.zeros((1, 64, 48, 48), dtype=np.float32))
        w = Tensor(np.zeros((64, 1, 4, 4), dtype=np.float32))
        assert conv_transpose2d(x, w, stride=2, pad=1).shape == (1, 1, 96, 96)

    @pytest.mark.parametrize("seed", range(10))
    def test_adjoint_identity(self, seed):
        # <conv2d(x, w), y> == <x, conv_transpose2d(y, w)> with shared weights;
        # geometry kept stride-exact so the transpose restores the input size
        rng = np.random.default_rng(200 + seed)
        n, c, k = 2, int(rng.integers(1, 4)), int(rng.integers(1, 4))
        kh = int(rng.integers(1, 5))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, 2))
        h = kh - 2 * p + s * int(rng.integers(1, 5))
        if h < 1:
            h += s * 2
        x = rng.standard_normal((n, c, h, h))
        w = rng.standard_normal((k, c, kh, kh))
        fwd = conv2d(Tensor(x), Tensor(w), stride=s, pad=p)
        y = rng.standard_normal(fwd.shape)
        back = conv_transpose2d(Tensor(y), Tensor(w), stride=s, pad=p)
        lhs = float(np.sum(fwd.data * y))
        rhs = float(np.sum(x * back.data))
        assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_conv2d_grad(self, seed):
        rng = np.random.default_rng(300 + seed)
        x = rng.standard_normal((2, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        r = rng.standard_normal((2, 3, 3, 3))

        def loss(xt, wt, bt):
            return (conv2d(xt, wt, bt, stride=2, pad=1) * Tensor(r)).sum()

        gradcheck(loss, [x, w, b])

    @pytest.mark.parametrize("seed", range(5))
    def test_conv_transpose2d_grad(self, seed):
        rng = np.random.default_rng(400 + seed)
        x = rng.standard_normal((2, 3, 3, 3))
        w = rng.standard_normal((3, 2, 4, 4))
        b = rng.standard_normal(2)
        r = rng.standard_normal((2, 2, 6, 6))

        def loss(xt, wt, bt):
            return (conv_transpose2d(xt, wt, bt, stride=2, pad=1) * Tensor(r)).sum()

        gradcheck(loss, [x, w, b])

    @pytest.mark.parametrize("kind", ["relu", "leaky_relu_0.2", "tanh", "sigmoid"])
    def test_activation_grads(self, kind):
        rng = np.random.default_rng(hash(kind) % 1000)
        x = rng.standard_normal((4, 5)) + 0.1  # keep away from relu kink
        r = rng.standard_normal((4, 5))
        gradcheck(lambda t: (activation(t, kind) * Tensor(r)).sum(), [x])

    def test_batch_norm_grad_train_mode(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((3, 2, 4, 4))
        gamma = rng.standard_normal(2) + 1.0
        beta = rng.standard_normal(2)
        r = rng.standard_normal((3, 2, 4, 4))

        def loss(xt, gt, bt):
            state = BNState(2, dtype=np.float64)
            return (batch_norm(xt, gt, bt, state, train=True) * Tensor(r)).sum()

        gradcheck(loss, [x, gamma, beta])

    def test_composed_chain_grad(self):
        # conv -> batch_norm -> leaky_relu -> sum, as one chained graph
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 2, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        gamma = rng.standard_normal(3) + 1.0
        beta = rng.standard_normal(3)

        def loss(xt, wt, gt, bt):
            y = conv2d(xt, wt, stride=1, pad=1)
            y = batch_norm(y, gt, bt, BNState(3, dtype=np.float64), train=True)
            return activation(y, "leaky_relu_0.2").sum()

        gradcheck(loss, [x, w, gamma, beta])

    def test_softmax_matmul_grads(self):
        rng = np.random.default_rng(13)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 4, 3))
        r = rng.standard_normal((2, 3, 3))

        def loss(at, bt):
            return (softmax(at @ bt, axis=-1) * Tensor(r)).sum()

        gradcheck(loss, [a, b])

    def test_dropout_grad_with_fixed_mask(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((4, 4))
        base = RngStream(99)

        def loss(t):
            return dropout(t, 0.4, base.clone(), active=True).sum()

        gradcheck(loss, [x])

    def test_square_sum_gradient_exact(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, 2 * x.data)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_backward_rejects_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 2).backward()

    def test_no_grad_suppresses_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = x * 2
        assert not y.requires_grad

    def test_concat_pad_grads(self):
        rng = np.random.default_rng(19)
        a = rng.standard_normal((1, 2, 3, 3))
        b = rng.standard_normal((1, 3, 3, 3))
        r = rng.standard_normal((1, 5, 5, 4))

        def loss(at, bt):
            return (pad2d(concat([at, bt], axis=1), (1, 1, 0, 1)) * Tensor(r)).sum()

        gradcheck(loss, [a, b])


class TestActivationValues:
    def test_leaky_relu_slope(self):
        out = activation(Tensor(np.array([-1.0])), "leaky_relu_0.2")
        np.testing.assert_allclose(out.data, [-0.2])

    def test_relu_values(self):
        out = activation(Tensor(np.array([-3.0, 3.0])), "relu")
        np.testing.assert_array_equal(out.data, [0.0, 3.0])

    def test_sigmoid_tanh_at_zero(self):
        assert activation(Tensor(np.array([0.0])), "sigmoid").item() == 0.5
        assert activation(Tensor(np.array([0.0])), "tanh").item() == 0.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            activation(Tensor(np.zeros(1)), "gelu")


class TestBatchNorm:
    def test_constant_input_returns_beta(self):
        x = Tensor(np.full((2, 3, 2, 2), 5.0))
        gamma = Tensor(np.ones(3))
        beta = Tensor(np.array([1.0, -2.0, 0.5]))
        out = batch_norm(x, gamma, beta, BNState(3, dtype=np.float64), train=True)
        np.testing.assert_allclose(out.data, np.broadcast_to(
            beta.data.reshape(1, 3, 1, 1), (2, 3, 2, 2)), atol=1e-9)

    def test_two_value_batch(self):
        x = Tensor(np.array([0.0, 2.0]).reshape(2, 1, 1, 1))
        out = batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)),
                         BNState(1, dtype=np.float64), train=True)
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-4)

    def test_infer_mode_identity_statistics(self):
        state = BNState(2, dtype=np.float64)  # mean 0, var 1
        x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 3)))
        gamma = Tensor(np.array([2.0, 0.5]))
        beta = Tensor(np.array([1.0, -1.0]))
        out = batch_norm(x, gamma, beta, state, train=False)
        expected = gamma.data.reshape(1, 2, 1, 1) * x.data + beta.data.reshape(1, 2, 1, 1)
        np.testing.assert_allclose(out.data, expected, atol=1e-4)

    def test_running_stats_update(self):
        state = BNState(1, dtype=np.float64)
        x = Tensor(np.array([0.0, 2.0]).reshape(2, 1, 1, 1))
        batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), state, train=True)
        np.testing.assert_allclose(state.mean, [0.1])       # 0.9*0 + 0.1*1
        np.testing.assert_allclose(state.var, [1.0])        # 0.9*1 + 0.1*1

    def test_channel_mismatch(self):
        x = Tensor(np.zeros((1, 3, 2, 2)))
        with pytest.raises(ShapeError):
            batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       BNState(2, dtype=np.float64), train=True)


class TestDropout:
    def test_inactive_is_identity(self):
        x = Tensor(np.ones((3, 3)))
        out = dropout(x, 0.5, RngStream(0), active=False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_rate_is_identity(self):
        x = Tensor(np.ones((3, 3)))
        out = dropout(x, 0.0, RngStream(0), active=True)
        np.testing.assert_array_equal(out.data, x.data)

    def test_monte_carlo_mean(self):
        x = Tensor(np.ones(1_000_000, dtype=np.float32))
        out = dropout(x, 0.5, RngStream(42), active=True)
        assert abs(float(out.data.mean()) - 1.0) < 0.01

    def test_bitwise_reproducible(self):
        x = Tensor(np.random.default_rng(1).standard_normal((64, 64)))
        a = dropout(x, 0.3, RngStream(7, stream=3), active=True)
        b = dropout(x, 0.3, RngStream(7, stream=3), active=True)
        assert np.array_equal(a.data, b.data)

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_rate_validation(self, p):
        with pytest.raises(ValueError):
            dropout(Tensor(np.ones(2)), p, RngStream(0))


class TestRngStream:
    def test_same_state_same_draws(self):
        a = RngStream(123, stream=5, counter=9)
        b = RngStream(123, stream=5, counter=9)
        assert np.array_equal(a.normal((10,)), b.normal((10,)))
        assert np.array_equal(a.uniform((10,)), b.uniform((10,)))

    def test_counter_advances(self):
        s = RngStream(1)
        first = s.normal((4,))
        second = s.normal((4,))
        assert not np.array_equal(first, second)
        assert s.counter == 2

    def test_substreams_disjoint(self):
        base = RngStream(9)
        d0 = base.substream(0).uniform((64,))
        d1 = base.substream(1).uniform((64,))
        assert not np.array_equal(d0, d1)

    def test_permutation_deterministic(self):
        assert np.array_equal(RngStream(3).permutation(20), RngStream(3).permutation(20))


class TestAdam:
    def test_first_step_hand_value(self):
        p = Tensor(np.array([1.0]), requires_grad=True, name="w")
        opt = Adam([("w", p)], lr=2e-4, beta1=0.5, beta2=0.999)
        p.grad = np.array([1.0])
        opt.step()
        # m_hat = 1, v_hat = 1 -> update = -lr / (1 + eps)
        expected = 1.0 - 2e-4 / (1.0 + 1e-8)
        np.testing.assert_allclose(p.data, [expected], rtol=0, atol=1e-12)
        assert opt.t == 1

    def test_zero_grad_zero_moments_is_noop(self):
        p = Tensor(np.array([3.0, -2.0]), requires_grad=True, name="w")
        opt = Adam([("w", p)])
        p.grad = np.zeros(2)
        before = p.data.copy()
        opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_nan_grad_names_parameter(self):
        p = Tensor(np.array([1.0]), requires_grad=True, name="gen.en1.w")
        opt = Adam([("gen.en1.w", p)])
        p.grad = np.array([np.nan])
        with pytest.raises(NumericError, match="gen.en1.w"):
            opt.step()


class TestFiniteForward:
    @pytest.mark.parametrize("seed", range(3))
    def test_forward_ops_stay_finite(self, seed):
        rng = np.random.default_rng(500 + seed)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
        out = conv2d(x, w, stride=1, pad=1)
        out = activation(out, "leaky_relu_0.2")
        out = batch_norm(out, Tensor(np.ones(4, dtype=np.float32)),
                         Tensor(np.zeros(4, dtype=np.float32)),
                         BNState(4), train=True)
        assert np.all(np.isfinite(out.data))
