import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densedrop import ops
from densedrop.ops import BatchNormState
from densedrop.tensor import NumericError, ShapeError, Tensor, UsageError, backward

from oracles import central_difference, naive_conv2d


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def gradcheck(build, inputs, seed=0, tol=1e-4):
    """Compare backward() against central differences for every input entry.

    ``build(*inputs)`` returns an output tensor; it is reduced with a fixed
    random weighting so every output element matters.
    """
    out = build(*inputs)
    weights = np.random.default_rng(seed).normal(size=out.shape)

    def loss_value():
        return float((build(*inputs).data * weights).sum())

    for t in inputs:
        t.grad = None
    loss = ops.total(ops.mul(build(*inputs), Tensor(weights)))
    grads = backward(loss)
    worst = 0.0
    for t in inputs:
        flat = t.data.reshape(-1)
        g = grads[t].reshape(-1)
        for idx in range(flat.size):
            num = central_difference(loss_value, flat, idx)
            denom = max(abs(num), abs(g[idx]), 1e-6)
            worst = max(worst, abs(num - g[idx]) / denom)
    assert worst < tol, worst
    return worst


class TestConv2d:
    def test_box_sum(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = ops.conv2d(x, w, padding=1).data[0, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == 4.0
        assert out[0, 2] == out[2, 0] == out[2, 2] == 4.0

    def test_zero_weight(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        out = ops.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), padding=1)
        assert not out.data.any()

    @pytest.mark.parametrize(
        "xshape,wshape,stride,padding",
        [
            ((2, 3, 5, 5), (4, 3, 3, 3), 1, 1),
            ((2, 3, 5, 5), (4, 3, 3, 3), 2, 1),
            ((2, 6, 4, 4), (3, 6, 1, 1), 1, 0),
            ((1, 2, 6, 5), (2, 2, 3, 3), 1, 0),
            ((1, 2, 4, 4), (2, 2, 1, 1), 2, 1),
        ],
    )
    def test_matches_naive_loops(self, rng, xshape, wshape, stride, padding):
        x = rng.normal(size=xshape)
        w = rng.normal(size=wshape)
        got = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
        np.testing.assert_allclose(got, naive_conv2d(x, w, stride, padding), atol=1e-6, rtol=0)

    def test_output_extent(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 7, 9)))
        out = ops.conv2d(x, Tensor(rng.normal(size=(3, 2, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 3, (7 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_linear_in_input_and_weight(self, rng):
        x1, x2 = rng.normal(size=(2, 1, 2, 4, 4))
        w1, w2 = rng.normal(size=(2, 3, 2, 3, 3))
        conv = lambda a, b: ops.conv2d(Tensor(a), Tensor(b), padding=1).data  # noqa: E731
        np.testing.assert_allclose(conv(2 * x1 + x2, w1), 2 * conv(x1, w1) + conv(x2, w1), atol=1e-10)
        np.testing.assert_allclose(conv(x1, w1 - 3 * w2), conv(x1, w1) - 3 * conv(x1, w2), atol=1e-10)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 3, 4, 4\).*\(2, 2, 3, 3\)"):
            ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))

    @pytest.mark.parametrize("wshape,padding", [((3, 2, 3, 3), 1), ((3, 2, 1, 1), 0)])
    def test_gradients(self, rng, wshape, padding):
        x, w = t64(rng.normal(size=(2, 2, 4, 4))), t64(rng.normal(size=wshape))
        gradcheck(lambda a, b: ops.conv2d(a, b, padding=padding), [x, w])

    def test_strided_gradients(self, rng):
        x, w = t64(rng.normal(size=(1, 2, 5, 5))), t64(rng.normal(size=(2, 2, 3, 3)))
        gradcheck(lambda a, b: ops.conv2d(a, b, stride=2, padding=1), [x, w])


class TestBatchNorm:
    def test_fixed_point(self, rng):
        x = rng.normal(size=(8, 3, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        state = BatchNormState.create(3, np.float64)
        out = ops.batchnorm(Tensor(x), state, train=True).data
        # Only epsilon separates output from input: 1/sqrt(1 + 1e-5) ~ 1 - 5e-6.
        np.testing.assert_allclose(out, x, atol=5e-5 * np.abs(x).max())

    def test_zero_gamma_gives_beta(self, rng):
        state = BatchNormState.create(3, np.float64)
        state.gamma.data[:] = 0.0
        state.beta.data[:] = [1.0, -2.0, 0.5]
        out = ops.batchnorm(Tensor(rng.normal(size=(4, 3, 2, 2))), state, train=True).data
        np.testing.assert_array_equal(out, np.broadcast_to(state.beta.data.reshape(1, 3, 1, 1), out.shape))

    def test_train_statistics(self, rng):
        x = rng.normal(3.0, 5.0, size=(6, 4, 5, 5))
        state = BatchNormState.create(4, np.float64)
        out = ops.batchnorm(Tensor(x), state, train=True).data
        mean = out.mean(axis=(0, 2, 3))
        var = out.var(axis=(0, 2, 3))
        # Expected variance is var/(var+eps), computed directly from the input.
        expected_var = x.var(axis=(0, 2, 3)) / (x.var(axis=(0, 2, 3)) + 1e-5)
        np.testing.assert_allclose(mean, 0.0, atol=1e-5)
        np.testing.assert_allclose(var, 1.0, atol=1e-5)
        np.testing.assert_allclose(var, expected_var, atol=1e-12)

    def test_running_stats_and_eval(self, rng):
        x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
        state = BatchNormState.create(2, np.float64)
        ops.batchnorm(Tensor(x), state, train=True)
        m = 4 * 9
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
        out = ops.batchnorm(Tensor(x), state, train=False).data
        ref = (x - state.running_mean.reshape(1, 2, 1, 1)) / np.sqrt(state.running_var.reshape(1, 2, 1, 1) + 1e-5)
        np.testing.assert_allclose(out, ref)

    def test_degenerate_batch(self):
        state = BatchNormState.create(2, np.float64)
        with pytest.raises(ShapeError):
            ops.batchnorm(Tensor(np.zeros((1, 2, 1, 1))), state, train=True)

    @pytest.mark.parametrize("train", [True, False])
    def test_gradients(self, rng, train):
        state = BatchNormState.create(3, np.float64)
        state.gamma.data[:] = rng.normal(size=3)
        state.beta.data[:] = rng.normal(size=3)
        state.running_var[:] = [0.5, 2.0, 1.5]
        x = t64(rng.normal(size=(3, 3, 2, 2)))
        gradcheck(lambda a, g, b: ops.batchnorm(a, state, train), [x, state.gamma, state.beta])


class TestRelu:
    def test_definition(self):
        np.testing.assert_array_equal(ops.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        assert not ops.relu(Tensor(-np.arange(1.0, 5.0))).data.any()

    def test_subgradient(self):
        x = t64([3.0, -3.0, 0.0])
        grads = backward(ops.total(ops.relu(x)))
        np.testing.assert_array_equal(grads[x], [1.0, 0.0, 0.0])

    def test_gradients(self, rng):
        x = t64(rng.normal(size=(2, 3, 3, 3)))
        gradcheck(ops.relu, [x])


class TestConcat:
    def test_single(self, rng):
        a = rng.normal(size=(2, 3, 4, 4))
        np.testing.assert_array_equal(ops.concat([Tensor(a)]).data, a)

    def test_order(self, rng):
        a, b = rng.normal(size=(2, 2, 2, 3, 3))
        out = ops.concat([Tensor(a), Tensor(b)]).data
        assert out.shape == (2, 4, 3, 3)
        np.testing.assert_array_equal(out[:, :2], a)
        np.testing.assert_array_equal(out[:, 2:], b)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            ops.concat([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 5)))])

    def test_sum_gradient_is_ones(self, rng):
        a, b = t64(rng.normal(size=(1, 2, 3, 3))), t64(rng.normal(size=(1, 3, 3, 3)))
        grads = backward(ops.total(ops.concat([a, b])))
        np.testing.assert_array_equal(grads[a], np.ones(a.shape))
        np.testing.assert_array_equal(grads[b], np.ones(b.shape))
        gradcheck(lambda x, y: ops.concat([x, y]), [a, b])

    def test_backward_partitions_upstream(self, rng):
        parts = [t64(rng.normal(size=(2, c, 2, 2))) for c in (1, 3, 2)]
        upstream = rng.normal(size=(2, 6, 2, 2))
        grads = backward(ops.total(ops.mul(ops.concat(parts), Tensor(upstream))))
        np.testing.assert_array_equal(np.concatenate([grads[p] for p in parts], axis=1), upstream)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 5), min_size=1, max_size=6), st.integers(0, 2**31 - 1))
    def test_partition_property(self, widths, seed):
        r = np.random.default_rng(seed)
        parts = [t64(r.normal(size=(2, w, 2, 3))) for w in widths]
        upstream = r.normal(size=(2, sum(widths), 2, 3))
        grads = backward(ops.total(ops.mul(ops.concat(parts), Tensor(upstream))))
        assert np.array_equal(np.concatenate([grads[p] for p in parts], axis=1), upstream)

    def test_concat_slice_round_trip(self, rng):
        a, b = t64(rng.normal(size=(1, 2, 2, 2))), t64(rng.normal(size=(1, 3, 2, 2)))
        up = rng.normal(size=(1, 3, 2, 2))
        sliced = ops.narrow(ops.concat([a, b]), 2, 5)
        np.testing.assert_array_equal(sliced.data, b.data)
        grads = backward(ops.total(ops.mul(sliced, Tensor(up))))
        np.testing.assert_array_equal(grads[b], up)
        np.testing.assert_array_equal(grads[a], np.zeros(a.shape))


class TestHead:
    def test_global_pool_constant(self):
        x = np.full((2, 3, 4, 4), 2.5)
        np.testing.assert_array_equal(ops.global_avgpool(Tensor(x)).data, np.full((2, 3), 2.5))

    def test_uniform_logits_loss(self):
        for classes in (2, 10, 100):
            loss = ops.softmax_cross_entropy(Tensor(np.zeros((4, classes))), np.arange(4) % classes)
            assert math.isclose(float(loss.data), math.log(classes), rel_tol=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_identity_linear(self, rng):
        x = rng.normal(size=(5, 4))
        out = ops.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data
        np.testing.assert_array_equal(out, x)

    def test_avgpool_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(ops.avgpool2x2(Tensor(x)).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_gradients(self, rng):
        gradcheck(ops.avgpool2x2, [t64(rng.normal(size=(2, 2, 4, 4)))])
        gradcheck(ops.global_avgpool, [t64(rng.normal(size=(2, 3, 3, 3)))])
        gradcheck(ops.linear, [t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(2, 4))), t64(rng.normal(size=2))])
        labels = np.array([0, 2, 1])
        gradcheck(lambda z: ops.softmax_cross_entropy(z, labels), [t64(rng.normal(size=(3, 4)))])
        factor = rng.normal(size=(2, 3, 1, 1))
        gradcheck(lambda z: ops.scale(z, factor), [t64(rng.normal(size=(2, 3, 2, 2)))])


class TestBackward:
    def test_square_sum(self):
        w = t64([1.0, 2.0])
        grads = backward(ops.total(ops.mul(w, w)))
        np.testing.assert_array_equal(grads[w], [2.0, 4.0])
        np.testing.assert_array_equal(w.grad, [2.0, 4.0])

    def test_operator_sugar(self):
        w = t64([1.0, -3.0])
        (w * w + w).sum().backward()
        np.testing.assert_array_equal(w.grad, [3.0, -5.0])

    def test_non_scalar_root(self):
        with pytest.raises(UsageError):
            backward(t64([1.0, 2.0]))

    def test_unreached_parameters_get_zeros(self):
        w, unused = t64([1.0]), t64([[5.0, 6.0]])
        grads = backward(ops.total(ops.mul(w, w)), params=[w, unused])
        np.testing.assert_array_equal(grads[unused], np.zeros((1, 2)))

    def test_shared_input_accumulates(self):
        w = t64([2.0])
        grads = backward(ops.total(ops.add(ops.mul(w, w), w)))
        np.testing.assert_array_equal(grads[w], [5.0])

    def test_deterministic(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))

        def run():
            xt, wt = t64(x), t64(w)
            loss = ops.total(ops.relu(ops.conv2d(xt, wt, padding=1)))
            g = backward(loss)
            return g[xt], g[wt]

        a, b = run(), run()
        assert all(np.array_equal(p, q) for p, q in zip(a, b))

    def test_non_finite_is_an_error(self):
        with pytest.raises(NumericError), np.errstate(over="ignore"):
            ops.mul(t64([1e200]), t64([1e200]))

    def test_deep_chain_no_recursion_limit(self):
        x = t64([1.0])
        y = x
        for _ in range(5000):
            y = ops.add(y, x)
        np.testing.assert_array_equal(backward(ops.total(y))[x], [5001.0])
