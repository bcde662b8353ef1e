"""Tensor engine: forward oracles, autodiff finite-difference checks, rotation."""

import math

import numpy as np
import pytest

from rotfeat import tensor as T

from helpers import conv2d_naive, fd_gradcheck, max_abs, rand_tensor


class TestConv2d:
    def test_all_ones_counts_taps(self):
        x = T.Tensor(np.ones((1, 1, 3, 3)))
        w = T.Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, stride=1, padding=1).data[0, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == 4.0
        assert out[0, 2] == 4.0
        assert out[2, 0] == 4.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = T.Tensor(rng.random((2, 3, 6, 6)))
        w = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = T.conv2d(x, T.Tensor(w), stride=1, padding=1)
        np.testing.assert_allclose(out.data, x.data, atol=1e-7)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        got = T.conv2d(T.Tensor(x, dtype=np.float64), T.Tensor(w, dtype=np.float64),
                       T.Tensor(b, dtype=np.float64), stride=1, padding=1)
        want = conv2d_naive(x, w, b, stride=1, padding=1)
        assert max_abs(got.data, want) < 1e-6

    @pytest.mark.parametrize("shape,k,stride,padding", [
        ((2, 4, 8, 8), 3, 1, 1),
        ((1, 3, 7, 7), 3, 2, 0),
        ((2, 2, 6, 6), 5, 1, 2),
        ((1, 2, 6, 6), 2, 1, 0),
    ])
    def test_random_shapes_match_naive(self, shape, k, stride, padding):
        rng = np.random.default_rng(hash((shape, k, stride, padding)) % 2**32)
        x = rng.standard_normal(shape)
        w = rng.standard_normal((3, shape[1], k, k))
        got = T.conv2d(T.Tensor(x, dtype=np.float64), T.Tensor(w, dtype=np.float64),
                       stride=stride, padding=padding)
        want = conv2d_naive(x, w, stride=stride, padding=padding)
        assert max_abs(got.data, want) < 1e-6

    def test_channel_mismatch_names_shapes(self):
        x = T.Tensor(np.zeros((1, 2, 4, 4)))
        w = T.Tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(T.ShapeMismatchError) as e:
            T.conv2d(x, w)
        assert "(1, 2, 4, 4)" in str(e.value) and "(1, 3, 3, 3)" in str(e.value)

    def test_output_size_formula(self):
        x = T.Tensor(np.zeros((1, 1, 9, 9)))
        w = T.Tensor(np.zeros((1, 1, 3, 3)))
        assert T.conv2d(x, w, stride=2, padding=1).shape == (1, 1, 5, 5)
        assert T.conv2d(x, w, stride=1, padding=1).shape == (1, 1, 9, 9)


class TestBatchnorm:
    def test_identity_params(self):
        rng = np.random.default_rng(2)
        x = T.Tensor(rng.standard_normal((2, 3, 4, 4)))
        out = T.batchnorm_infer(x, np.zeros(3), np.ones(3), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), eps=0.0)
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_scalar_reference(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 4, 3, 3))
        mean = rng.standard_normal(4)
        var = rng.random(4) + 0.1
        gamma = rng.standard_normal(4)
        beta = rng.standard_normal(4)
        eps = 1e-5
        got = T.batchnorm_infer(T.Tensor(x, dtype=np.float64), mean, var,
                                T.Tensor(gamma, dtype=np.float64), T.Tensor(beta, dtype=np.float64), eps)
        want = np.empty_like(x)
        for b in range(2):
            for c in range(4):
                for i in range(3):
                    for j in range(3):
                        want[b, c, i, j] = (x[b, c, i, j] - mean[c]) / math.sqrt(var[c] + eps) * gamma[c] + beta[c]
        assert max_abs(got.data, want) < 1e-6

    def test_negative_variance_rejected(self):
        x = T.Tensor(np.zeros((1, 2, 2, 2)))
        with pytest.raises(ValueError):
            T.batchnorm_infer(x, np.zeros(2), np.array([1.0, -0.5]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)))


class TestActivations:
    def test_softmax_symmetry(self):
        x = T.Tensor(np.zeros((1, 2, 1, 1)))
        out = T.softmax_channel(x).data
        np.testing.assert_allclose(out[0, :, 0, 0], [0.5, 0.5])

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(4)
        x = T.Tensor(rng.standard_normal((2, 5, 4, 4)) * 3)
        s = T.softmax_channel(x).data.sum(axis=1)
        np.testing.assert_allclose(s, 1.0, atol=1e-6)

    def test_l2_normalize_345(self):
        x = T.Tensor(np.array([3.0, 4.0]).reshape(1, 2, 1, 1))
        out = T.l2_normalize_channel(x).data[0, :, 0, 0]
        np.testing.assert_allclose(out, [0.6, 0.8], atol=1e-6)

    def test_l2_normalize_zero_vector_stays_zero(self):
        x = T.Tensor(np.zeros((1, 3, 2, 2)))
        out = T.l2_normalize_channel(x).data
        assert np.all(out == 0)

    def test_l2_normalize_unit_norms(self):
        rng = np.random.default_rng(5)
        x = T.Tensor(rng.standard_normal((1, 8, 5, 5)))
        n = np.linalg.norm(T.l2_normalize_channel(x).data, axis=1)
        np.testing.assert_allclose(n, 1.0, atol=1e-6)

    def test_softplus_at_zero(self):
        x = T.Tensor(np.zeros(1))
        assert abs(T.softplus(x).data[0] - math.log(2)) < 1e-6

    def test_relu(self):
        x = T.Tensor(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(T.relu(x).data, [0.0, 0.0, 2.0])


class TestRotateBilinear:
    def test_angle_zero_identity(self):
        rng = np.random.default_rng(6)
        x = T.Tensor(rng.random((1, 2, 5, 5)))
        np.testing.assert_array_equal(T.rotate_bilinear(x, 0).data, x.data)

    def test_angle_90_permutation(self):
        x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = T.rotate_bilinear(x, 90).data[0, 0]
        # [[a,b],[c,d]] -> [[b,d],[a,c]] counter-clockwise, y down
        np.testing.assert_array_equal(out, [[2.0, 4.0], [1.0, 3.0]])

    def test_full_turn(self):
        rng = np.random.default_rng(7)
        x = T.Tensor(rng.random((1, 1, 8, 8)))
        np.testing.assert_allclose(T.rotate_bilinear(x, 360).data, x.data, atol=1e-6)

    def test_four_quarter_turns_exact(self):
        rng = np.random.default_rng(8)
        x = T.Tensor(rng.random((2, 3, 7, 7)))
        y = x
        for _ in range(4):
            y = T.rotate_bilinear(y, 90)
        np.testing.assert_array_equal(y.data, x.data)

    def test_interpolated_angle_roundtrip(self):
        rng = np.random.default_rng(9)
        x = T.Tensor(rng.random((1, 1, 17, 17)))
        y = T.rotate_bilinear(T.rotate_bilinear(x, 45), -45)
        # interior agrees after forward/backward interpolation
        err = max_abs(y.data[0, 0, 6:11, 6:11], x.data[0, 0, 6:11, 6:11])
        assert err < 0.35

    def test_rot90_matches_general_path_sampling(self):
        # the interpolated path at 90 degrees minus epsilon approaches the exact path
        rng = np.random.default_rng(10)
        x = T.Tensor(rng.random((1, 1, 9, 9)), dtype=np.float64)
        exact = T.rotate_bilinear(x, 90).data
        near = T.rotate_bilinear(x, 90 + 1e-7).data
        assert max_abs(exact, near) < 1e-5


class TestWarpBilinear:
    def test_identity_matrix(self):
        rng = np.random.default_rng(11)
        x = T.Tensor(rng.random((1, 2, 6, 6)))
        out = T.warp_bilinear(x, np.eye(3))
        np.testing.assert_allclose(out.data, x.data, atol=1e-7)

    def test_translation_shifts_content(self):
        x = np.zeros((1, 1, 5, 5), dtype=np.float32)
        x[0, 0, 2, 2] = 1.0
        M = np.eye(3)
        M[0, 2] = 1.0  # output(q) samples source at x+1
        out = T.warp_bilinear(T.Tensor(x), M).data
        assert out[0, 0, 2, 1] == 1.0

    def test_out_of_support_reads_zero(self):
        x = T.Tensor(np.ones((1, 1, 4, 4)))
        M = np.eye(3)
        M[0, 2] = 100.0
        assert np.all(T.warp_bilinear(x, M).data == 0)


class TestAutodiff:
    def test_sum_gradient_is_ones(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with T.Tape() as tape:
            loss = T.reduce_sum(x)
        T.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_relu_subgradient(self):
        x = T.Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        with T.Tape() as tape:
            loss = T.reduce_sum(T.relu(x))
        T.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_backward_rejects_non_scalar(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.Tape() as tape:
            y = T.mul(x, 2.0)
        with pytest.raises(ValueError):
            T.backward(tape, y)

    def test_fanout_accumulates(self):
        x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with T.Tape() as tape:
            y = T.add(T.mul(x, 3.0), T.mul(x, 2.0))
            loss = T.reduce_sum(y)
        T.backward(tape, loss)
        np.testing.assert_allclose(x.grad, [5.0, 5.0])

    def test_repeated_backward_accumulates_on_leaf(self):
        x = T.Tensor(np.array([1.0]), requires_grad=True)
        for _ in range(2):
            with T.Tape() as tape:
                loss = T.reduce_sum(T.mul(x, 1.0))
            T.backward(tape, loss)
        np.testing.assert_allclose(x.grad, [2.0])

    def test_no_tape_records_nothing(self):
        x = T.Tensor(np.ones(4), requires_grad=True)
        y = T.mul(x, 2.0)
        assert y.grad is None and x.grad is None


class TestGradientsFiniteDifference:
    """Central-difference oracle for every differentiable op."""

    def test_binary_ops(self):
        rng = np.random.default_rng(20)
        for fn in (T.add, T.sub, T.mul, T.div):
            a = rand_tensor(rng, (2, 3))
            # keep |b| in [1.5, 2.5] so div stays far from its pole
            b = T.Tensor((rng.random((2, 3)) + 1.5) * rng.choice([-1.0, 1.0], (2, 3)), dtype=np.float64)
            fd_gradcheck(lambda u, v, f=fn: T.reduce_sum(T.mul(f(u, v), f(u, v))), [a, b])

    def test_broadcast_ops(self):
        rng = np.random.default_rng(21)
        a = rand_tensor(rng, (2, 3, 2, 2))
        b = rand_tensor(rng, (1, 3, 1, 1))
        fd_gradcheck(lambda u, v: T.reduce_sum(T.mul(T.add(u, v), T.add(u, v))), [a, b])

    def test_unary_ops(self):
        rng = np.random.default_rng(22)
        x = T.Tensor(rng.random((3, 3)) + 0.5, dtype=np.float64)
        fd_gradcheck(lambda u: T.reduce_sum(T.mul(T.sqrt(u), T.softplus(u))), [x])
        y = T.Tensor(rng.standard_normal((3, 3)) + 0.05, dtype=np.float64)
        fd_gradcheck(lambda u: T.reduce_sum(T.mul(T.relu(u), T.absolute(u))), [y])

    def test_conv2d_grad(self):
        rng = np.random.default_rng(23)
        x = rand_tensor(rng, (1, 2, 5, 5))
        w = rand_tensor(rng, (3, 2, 3, 3))
        b = rand_tensor(rng, (3,))
        weights = T.Tensor(rng.standard_normal((1, 3, 5, 5)), dtype=np.float64)

        def loss(xx, ww, bb):
            out = T.conv2d(xx, ww, bb, stride=1, padding=1)
            return T.reduce_sum(T.mul(out, weights))

        fd_gradcheck(loss, [x, w, b])

    def test_conv2d_strided_grad(self):
        rng = np.random.default_rng(24)
        x = rand_tensor(rng, (1, 2, 6, 6))
        w = rand_tensor(rng, (2, 2, 3, 3))
        fd_gradcheck(lambda xx, ww: T.reduce_sum(T.mul(T.conv2d(xx, ww, stride=2, padding=1),
                                                       T.conv2d(xx, ww, stride=2, padding=1))), [x, w])

    def test_batchnorm_grad(self):
        rng = np.random.default_rng(25)
        x = rand_tensor(rng, (2, 3, 3, 3))
        gamma = rand_tensor(rng, (3,))
        beta = rand_tensor(rng, (3,))
        mean = rng.standard_normal(3)
        var = rng.random(3) + 0.2
        mix = T.Tensor(rng.standard_normal((2, 3, 3, 3)), dtype=np.float64)

        def loss(xx, gg, bb):
            return T.reduce_sum(T.mul(T.batchnorm_infer(xx, mean, var, gg, bb, 1e-3), mix))

        fd_gradcheck(loss, [x, gamma, beta])

    def test_softmax_grad(self):
        rng = np.random.default_rng(26)
        x = rand_tensor(rng, (1, 4, 2, 2))
        mix = T.Tensor(rng.standard_normal((1, 4, 2, 2)), dtype=np.float64)
        fd_gradcheck(lambda u: T.reduce_sum(T.mul(T.softmax_channel(u), mix)), [x])

    def test_l2_normalize_grad(self):
        rng = np.random.default_rng(27)
        x = T.Tensor(rng.standard_normal((1, 4, 2, 2)) + 0.5, dtype=np.float64)
        mix = T.Tensor(rng.standard_normal((1, 4, 2, 2)), dtype=np.float64)
        fd_gradcheck(lambda u: T.reduce_sum(T.mul(T.l2_normalize_channel(u), mix)), [x])

    def test_rotate_grad(self):
        rng = np.random.default_rng(28)
        x = rand_tensor(rng, (1, 1, 6, 6))
        mix = T.Tensor(rng.standard_normal((1, 1, 6, 6)), dtype=np.float64)
        fd_gradcheck(lambda u: T.reduce_sum(T.mul(T.rotate_bilinear(u, 33.0), mix)), [x])
        fd_gradcheck(lambda u: T.reduce_sum(T.mul(T.rotate_bilinear(u, 90.0), mix)), [x])

    def test_warp_grad(self):
        rng = np.random.default_rng(29)
        x = rand_tensor(rng, (1, 2, 5, 5))
        M = np.array([[0.9, 0.1, 0.3], [-0.1, 0.95, 0.2], [0.001, 0.0, 1.0]])
        mix = T.Tensor(rng.standard_normal((1, 2, 5, 5)), dtype=np.float64)
        fd_gradcheck(lambda u: T.reduce_sum(T.mul(T.warp_bilinear(u, M), mix)), [x])

    def test_reduction_and_shape_op_grads(self):
        rng = np.random.default_rng(30)
        x = rand_tensor(rng, (2, 6, 3, 3))
        mix2 = T.Tensor(rng.standard_normal((2, 3, 3, 3)), dtype=np.float64)
        fd_gradcheck(lambda u: T.reduce_sum(T.mul(T.group_max(u, 2), mix2)), [x])
        y = rand_tensor(rng, (3, 5))
        fd_gradcheck(lambda u: T.reduce_sum(T.mul(T.cumsum(u, 1), T.cumsum(u, 1))), [y])
        fd_gradcheck(lambda u: T.reduce_mean(T.mul(T.reshape(u, (5, 3)), T.reshape(u, (5, 3)))), [y])
        z = rand_tensor(rng, (1, 4, 4, 4))
        mixw = T.Tensor(rng.standard_normal((1, 4, 2 * 2 * 4)), dtype=np.float64)
        fd_gradcheck(lambda u: T.reduce_sum(T.mul(T.unfold_windows(u, 2, 2), mixw)), [z])

    def test_matmul_and_gather_grads(self):
        rng = np.random.default_rng(31)
        a = rand_tensor(rng, (3, 4))
        b = rand_tensor(rng, (4, 2))
        fd_gradcheck(lambda u, v: T.reduce_sum(T.mul(T.matmul(u, v), T.matmul(u, v))), [a, b])
        c = rand_tensor(rng, (2, 4))
        fd_gradcheck(lambda u, v: T.reduce_sum(T.mul(T.matmul(u, v, transpose_b=True),
                                                     T.matmul(u, v, transpose_b=True))), [a, c])
        m = rand_tensor(rng, (1, 3, 4, 4))
        ys, xs = np.array([0, 2, 2]), np.array([1, 3, 3])
        mix = T.Tensor(rng.standard_normal((3, 3)), dtype=np.float64)
        fd_gradcheck(lambda u: T.reduce_sum(T.mul(T.gather_pixels(u, ys, xs), mix)), [m])

    def test_channel_op_grads(self):
        rng = np.random.default_rng(32)
        x = rand_tensor(rng, (1, 6, 2, 2))
        mix = T.Tensor(rng.standard_normal((1, 6, 2, 2)), dtype=np.float64)
        perm = np.array([2, 0, 1, 5, 3, 4])
        fd_gradcheck(lambda u: T.reduce_sum(T.mul(T.permute_channels(u, perm), mix)), [x])
        mix3 = T.Tensor(rng.standard_normal((1, 3, 2, 2)), dtype=np.float64)
        fd_gradcheck(lambda u: T.reduce_sum(T.mul(T.take_channels(u, 1, 4), mix3)), [x])
        v = rand_tensor(rng, (4,))
        fd_gradcheck(lambda u: T.reduce_sum(T.mul(T.repeat_interleave(u, 3), T.repeat_interleave(u, 3))), [v])
        p = rand_tensor(rng, (1, 2, 3, 3))
        mixp = T.Tensor(rng.standard_normal((1, 2, 4, 5)), dtype=np.float64)
        fd_gradcheck(lambda u: T.reduce_sum(T.mul(T.pad2d(u, 1, 0, 1, 1), mixp)), [p])
