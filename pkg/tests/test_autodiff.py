import numpy as np
import pytest

from tinydistill import autodiff as ad
from tinydistill.autodiff import ShapeError, Tape, Tensor, backward

from oracles import check_grads


def param(rng, *shape):
    return Tensor(rng.uniform(-1, 1, shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        np.testing.assert_array_equal(ad.matmul(eye, eye).data, np.eye(2))

    def test_hand_arithmetic(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_vs_finite_differences(self, rng):
        a, b = param(rng, 3, 4), param(rng, 4, 2)
        # tighter than the generic 1e-4: sum of a bilinear form is exact under central differences
        check_grads(lambda: ad.sum(ad.matmul(a, b)), [a, b], tol=1e-6)


class TestConv2d:
    def test_all_ones(self):
        out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        np.testing.assert_array_equal(out.data, [[[[9.0]]]])

    def test_1x1_kernel_is_channel_matmul(self, rng):
        x = rng.uniform(-1, 1, (2, 3, 4, 5))
        w = rng.uniform(-1, 1, (6, 3, 1, 1))
        out = ad.conv2d(Tensor(x), Tensor(w)).data
        ref = (x.transpose(0, 2, 3, 1).reshape(-1, 3) @ w.reshape(6, 3).T)
        ref = ref.reshape(2, 4, 5, 6).transpose(0, 3, 1, 2)
        np.testing.assert_array_equal(out, ref)

    def test_matches_direct_loops(self, rng):
        x = rng.uniform(-1, 1, (2, 2, 5, 5))
        w = rng.uniform(-1, 1, (3, 2, 3, 3))
        out = ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((2, 3, 3, 3))
        for n in range(2):
            for o in range(3):
                for i in range(3):
                    for j in range(3):
                        ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o])
        np.testing.assert_allclose(out, ref, atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_gradients(self, rng, stride, padding):
        x, w, b = param(rng, 2, 2, 5, 5), param(rng, 3, 2, 3, 3), param(rng, 3)
        check_grads(lambda: ad.sum(ad.mul(ad.conv2d(x, w, b, stride, padding),
                                          ad.conv2d(x, w, b, stride, padding))), [x, w, b], tol=1e-5)

    def test_non_positive_output_size(self):
        with pytest.raises(ShapeError, match="non-positive"):
            ad.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))


class TestElementwise:
    def test_relu_forward_and_subgradient(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        y = ad.relu(x)
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
        backward(ad.sum(y))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_scale_by_zero(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        y = ad.scale(x, 0.0)
        np.testing.assert_array_equal(y.data, np.zeros(3))
        backward(ad.sum(y))
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_batch_broadcast(self, rng):
        x, b = param(rng, 4, 3), param(rng, 3)
        check_grads(lambda: ad.sum(ad.mul(ad.add(x, b), ad.mul(x, b))), [x, b])

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))
        with pytest.raises(ShapeError):
            ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    @pytest.mark.parametrize("op", [ad.relu, ad.exp, ad.log_softmax, lambda t: ad.scale(t, -2.5)])
    def test_unary_gradients(self, rng, op):
        x = param(rng, 3, 5)
        w = Tensor(rng.uniform(-1, 1, (3, 5)))
        check_grads(lambda: ad.sum(ad.mul(op(x), w)), [x])

    def test_reshape_gradient(self, rng):
        x = param(rng, 2, 6)
        w = Tensor(rng.uniform(-1, 1, (3, 4)))
        check_grads(lambda: ad.sum(ad.mul(ad.reshape(x, (3, 4)), w)), [x])


class TestReductions:
    def test_sum(self):
        assert ad.sum(Tensor([1.0, 2.0, 3.0])).item() == 6.0

    def test_mean_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(ad.mean(x))
        np.testing.assert_allclose(x.grad, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_max_index_tie_break(self):
        assert int(ad.max_index(Tensor([0.2, 0.5, 0.5]))) == 1

    def test_axis_errors(self):
        with pytest.raises(ValueError):
            ad.sum(Tensor(np.ones((2, 2))), axis=2)
        with pytest.raises(ValueError):
            ad.max_index(Tensor(np.ones((2, 0))), axis=1)

    @pytest.mark.parametrize("axis", [None, 0, 1, (0, 2), (1, 2)])
    def test_axis_gradients(self, rng, axis):
        x = param(rng, 2, 3, 4)
        out_shape = np.sum(x.data, axis=axis).shape
        w = Tensor(rng.uniform(-1, 1, out_shape))
        check_grads(lambda: ad.sum(ad.mul(ad.mean(x, axis=axis), w) if out_shape else ad.mean(x, axis)), [x])


class TestBatchNormOp:
    @pytest.mark.parametrize("batch_stats", [True, False])
    def test_gradients(self, rng, batch_stats):
        x, gamma, beta = param(rng, 3, 2, 2, 2), param(rng, 2), param(rng, 2)
        w = Tensor(rng.uniform(-1, 1, (3, 2, 2, 2)))
        fixed_mean, fixed_var = rng.uniform(-0.5, 0.5, 2), rng.uniform(0.5, 1.5, 2)

        def loss():
            if batch_stats:
                mu, var = x.data.mean(axis=(0, 2, 3)), x.data.var(axis=(0, 2, 3))
            else:
                mu, var = fixed_mean, fixed_var
            return ad.sum(ad.mul(ad.batch_norm(x, gamma, beta, mu, var, 1e-5, batch_stats), w))

        check_grads(loss, [x, gamma, beta])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(ad.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(ad.sum(ad.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss(self):
        with pytest.raises(ShapeError):
            backward(ad.scale(Tensor([1.0, 2.0], requires_grad=True), 2.0))

    def test_repeated_calls_accumulate(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = ad.sum(ad.mul(x, x))
        backward(loss)
        backward(loss)
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_mlp_vs_finite_differences(self, rng):
        x = Tensor(rng.uniform(-1, 1, (5, 4)))
        w1, b1, w2, b2 = param(rng, 4, 6), param(rng, 6), param(rng, 6, 3), param(rng, 3)
        target = Tensor(rng.uniform(-1, 1, (5, 3)))

        def loss():
            h = ad.relu(ad.add(ad.matmul(x, w1), b1))
            out = ad.add(ad.matmul(h, w2), b2)
            return ad.sum(ad.mul(out, target))

        check_grads(loss, [w1, b1, w2, b2])

    def test_linearity(self, rng):
        a, b = param(rng, 3, 4), param(rng, 4, 2)

        def l1():
            return ad.sum(ad.relu(ad.matmul(a, b)))

        def l2():
            return ad.sum(ad.exp(ad.scale(ad.matmul(a, b), 0.3)))

        backward(l1())
        backward(l2())
        sep = (a.grad.copy(), b.grad.copy())
        a.grad = b.grad = None
        backward(ad.add(l1(), l2()))
        np.testing.assert_allclose(a.grad, sep[0], rtol=0, atol=1e-12)
        np.testing.assert_allclose(b.grad, sep[1], rtol=0, atol=1e-12)

    def test_tape_is_topological(self, rng):
        a, b = param(rng, 2, 2), param(rng, 2, 2)
        h = ad.matmul(a, b)
        loss = ad.sum(ad.add(ad.relu(h), h))
        tape = Tape.from_root(loss)
        position = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                if parent.requires_grad:
                    assert position[id(parent)] < position[id(node)]
        backward(loss, tape)
        assert a.grad is not None and b.grad is not None

    def test_forward_is_deterministic(self, rng):
        a, b = param(rng, 8, 8), param(rng, 8, 8)
        assert np.array_equal(ad.matmul(a, b).data, ad.matmul(a, b).data)

    def test_non_finite_raises(self):
        with pytest.raises(FloatingPointError):
            ad.exp(Tensor([1000.0]))
