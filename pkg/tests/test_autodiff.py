import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcalgan.autodiff import (
    AdamState,
    Tensor,
    activate,
    adam_step,
    batchnorm,
    conv2d,
    conv_transpose2d,
    grad_check,
    grad_check_report,
    leaky_relu,
    linear,
    maxpool,
    tsum,
)
from dcalgan.autodiff.tensor import clamp, concat, log, norm
from dcalgan.errors import ConfigError, GraphError


def naive_conv2d(x, w, b, stride, pad):
    """Direct loop cross-correlation, used as an oracle."""
    t, bt, l, r = pad
    xp = np.pad(x, ((0, 0), (0, 0), (t, bt), (l, r)))
    n, c, h, wd = xp.shape
    o, _, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[bi, oc, i, j] = np.sum(patch * w[oc]) + (b[oc] if b is not None else 0)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv2d:
    def test_hand_window_sums(self):
        x = Tensor(np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3))
        w = Tensor(np.ones((1, 1, 2, 2)))
        out = conv2d(x, w, Tensor(np.zeros(1)), stride=1, pad=0)
        np.testing.assert_array_equal(out.data[0, 0], [[12, 16], [24, 28]])

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 1, 4, 4))
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_paper_first_layer_shape(self):
        x = Tensor(np.zeros((1, 1, 512, 512), dtype=np.float32))
        w = Tensor(np.zeros((96, 1, 11, 11), dtype=np.float32))
        out = conv2d(x, w, stride=4, pad=(3, 4, 3, 4))
        assert out.shape == (1, 96, 128, 128)

    @pytest.mark.parametrize("stride,pad", [(1, (0, 0, 0, 0)), (2, (1, 1, 1, 1)), (2, (0, 1, 2, 0)), (3, (1, 2, 1, 2))])
    def test_matches_loop_oracle(self, rng, stride, pad):
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 2))
        b = rng.normal(size=4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, pad), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ConfigError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 2, 2))))

    def test_nonpositive_output(self):
        with pytest.raises(ConfigError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        upstream = rng.normal(size=(2, 3, 3, 3))

        def f():
            return tsum(conv2d(x, w, b, stride=2, pad=(1, 1, 1, 1)) * upstream)

        assert grad_check(f, [x, w, b]) <= 1e-6


class TestConvTranspose:
    def test_doubling_shape(self):
        out = conv_transpose2d(Tensor(np.zeros((1, 5, 4, 4))), Tensor(np.zeros((5, 2, 4, 4))), stride=2, pad=1)
        assert out.shape == (1, 2, 8, 8)

    def test_single_pixel_scatter(self):
        k = np.array([[1.5, -2.0], [0.25, 4.0]])
        out = conv_transpose2d(Tensor(np.full((1, 1, 1, 1), 3.0)), Tensor(k.reshape(1, 1, 2, 2)))
        np.testing.assert_array_equal(out.data[0, 0], 3.0 * k)

    @pytest.mark.parametrize("shape,kernel,stride,pad", [
        ((2, 3, 8, 8), (4, 3, 4, 4), 2, (1, 1, 1, 1)),
        ((1, 2, 7, 7), (3, 2, 3, 3), 1, (1, 1, 1, 1)),
        ((1, 1, 9, 9), (2, 1, 3, 3), 3, (0, 0, 0, 0)),
        ((1, 1, 512 // 16, 512 // 16), (2, 1, 11, 11), 4, (3, 4, 3, 4)),
    ])
    def test_adjointness(self, rng, shape, kernel, stride, pad):
        x = rng.normal(size=shape)
        w = rng.normal(size=kernel)
        y_shape = conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).shape
        y = rng.normal(size=y_shape)
        lhs = np.sum(conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data * y)
        back = conv_transpose2d(Tensor(y), Tensor(w), stride=stride, pad=pad)
        assert back.shape == x.shape
        rhs = np.sum(x * back.data)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 3, 3)))
        w = Tensor(rng.normal(size=(3, 2, 4, 4)))
        b = Tensor(rng.normal(size=2))
        upstream = rng.normal(size=(2, 2, 6, 6))

        def f():
            return tsum(conv_transpose2d(x, w, b, stride=2, pad=1) * upstream)

        assert grad_check(f, [x, w, b]) <= 1e-6


class TestMaxpool:
    def test_single_window(self):
        out, _ = maxpool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 2)
        np.testing.assert_array_equal(out.data, [[[[4.0]]]])

    def test_overlapping_windows_enumerated(self):
        x = np.arange(1, 26, dtype=float).reshape(1, 1, 5, 5)
        out, index = maxpool(Tensor(x), 3, 2)
        np.testing.assert_array_equal(out.data[0, 0], [[13, 15], [23, 25]])
        np.testing.assert_array_equal(index[0, 0], [[12, 14], [22, 24]])

    def test_paper_shape(self):
        out, _ = maxpool(Tensor(np.zeros((1, 96, 128, 128), dtype=np.float32)), 3, 2, 1)
        assert out.shape == (1, 96, 64, 64)

    def test_padding_never_wins(self):
        x = -np.ones((1, 1, 4, 4)) * 100
        out, index = maxpool(Tensor(x), 3, 2, 1)
        assert np.all(out.data == -100)
        assert np.all((index >= 0) & (index < 16))

    def test_window_too_large(self):
        with pytest.raises(ConfigError):
            maxpool(Tensor(np.zeros((1, 1, 2, 2))), 5, 1, 1)

    def test_shared_element_wins_two_windows(self):
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 9.0
        _, index = maxpool(Tensor(x), 3, 2)
        counts = np.bincount(index.ravel(), minlength=25)
        assert counts[12] == 4

    def test_backward_routes_to_argmax(self, rng):
        x = Tensor(rng.permutation(49).astype(float).reshape(1, 1, 7, 7), requires_grad=True)
        out, index = maxpool(x, 3, 2, 1)
        g = rng.normal(size=out.shape)
        tsum(out * g).backward()
        expected = np.zeros(49)
        np.add.at(expected, index.ravel(), g.ravel())
        np.testing.assert_array_equal(x.grad.ravel(), expected)
        assert np.all(x.grad.ravel()[np.setdiff1d(np.arange(49), index.ravel())] == 0)

    def test_gradients(self, rng):
        # distinct, well-separated values avoid argmax flips under perturbation
        x = Tensor(rng.permutation(2 * 3 * 36).astype(float).reshape(2, 3, 6, 6) * 0.1)
        upstream = rng.normal(size=(2, 3, 3, 3))

        def f(t):
            return tsum(maxpool(t, 3, 2, 1)[0] * upstream)

        assert grad_check(f, x) <= 1e-8


class TestBatchnorm:
    def _params(self, c, gamma=1.0, beta=0.0):
        return (Tensor(np.full(c, gamma)), Tensor(np.full(c, beta)), np.zeros(c), np.ones(c))

    def test_train_mode_standardizes(self, rng):
        x = Tensor(rng.normal(3.0, 2.0, size=(4, 3, 5, 5)))
        out, mean, var = batchnorm(x, *self._params(3), training=True)
        assert np.all(np.abs(out.data.mean(axis=(0, 2, 3))) <= 1e-6)
        assert np.all(np.abs(out.data.var(axis=(0, 2, 3)) - 1) <= 1e-4)

    def test_constant_channel(self):
        x = Tensor(np.full((3, 1, 2, 2), 7.0))
        out, _, _ = batchnorm(x, *self._params(1, beta=5.0), training=True)
        np.testing.assert_allclose(out.data, 5.0)

    def test_two_values(self):
        x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
        out, _, _ = batchnorm(x, *self._params(1, gamma=2.0), training=True)
        s = 2 / math.sqrt(1 + 1e-5)
        np.testing.assert_allclose(out.data.ravel(), [-s, s], rtol=1e-14)

    def test_running_stats(self):
        x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
        gamma, beta, rm, rv = self._params(1)
        _, mean, var = batchnorm(x, gamma, beta, rm, rv, training=True, momentum=0.9)
        np.testing.assert_allclose(mean, [0.2])
        # unbiased batch variance of {1, 3} is 2
        np.testing.assert_allclose(var, [0.9 + 0.1 * 2.0])
        assert rm[0] == 0 and rv[0] == 1

    def test_eval_uses_running_stats(self):
        x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
        out, _, _ = batchnorm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), np.array([1.0]), np.array([4.0]),
                              training=False)
        np.testing.assert_allclose(out.data.ravel(), np.array([0.0, 2.0]) / math.sqrt(4 + 1e-5))

    def test_errors(self):
        with pytest.raises(ConfigError):
            batchnorm(Tensor(np.zeros((1, 1, 2, 2))), *self._params(1), training=True)
        with pytest.raises(ConfigError):
            batchnorm(Tensor(np.zeros((2, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                      np.zeros(1), np.zeros(1), training=False)

    @pytest.mark.parametrize("training", [True, False])
    def test_gradients(self, rng, training):
        x = Tensor(rng.normal(size=(3, 2, 3, 3)))
        gamma = Tensor(rng.normal(1, 0.3, size=2))
        beta = Tensor(rng.normal(size=2))
        upstream = rng.normal(size=(3, 2, 3, 3))

        def f():
            return tsum(batchnorm(x, gamma, beta, np.zeros(2), np.full(2, 1.5), training=training)[0] * upstream)

        assert grad_check(f, [x, gamma, beta]) <= 1e-4


class TestActivations:
    def test_values(self):
        np.testing.assert_allclose(leaky_relu(Tensor([-1.0, 0.0, 2.0]), 0.2).data, [-0.2, 0.0, 2.0])
        assert activate(Tensor([0.0]), "tanh").data[0] == 0.0
        assert activate(Tensor([0.0]), "sigmoid").data[0] == 0.5
        np.testing.assert_array_equal(activate(Tensor([-3.0, 4.0]), "relu").data, [0.0, 4.0])

    def test_ranges(self, rng):
        x = Tensor(rng.normal(0, 5, size=1000))
        assert np.all(np.abs(activate(x, "tanh").data) < 1)
        s = activate(Tensor(rng.normal(0, 5, size=1000)), "sigmoid").data
        assert np.all((s > 0) & (s < 1))

    def test_bad_slope(self):
        with pytest.raises(ConfigError):
            leaky_relu(Tensor([1.0]), 1.5)

    @pytest.mark.parametrize("kind", ["relu", "leaky_relu", "tanh", "sigmoid"])
    def test_gradients(self, rng, kind):
        # keep inputs away from the kink at 0
        x = rng.uniform(0.1, 2, size=(2, 3, 4, 4)) * rng.choice([-1, 1], size=(2, 3, 4, 4))
        upstream = rng.normal(size=x.shape)
        assert grad_check(lambda t: tsum(activate(t, kind) * upstream), Tensor(x)) <= 1e-6


class TestBackward:
    def test_sum(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
        tsum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones(x.shape))

    def test_square(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        tsum(x * x).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_fan_out_accumulates(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        y = x * 3.0
        tsum(y + y * y).backward()
        np.testing.assert_allclose(x.grad, 3.0 + 2 * 9.0 * np.array([1.0, -2.0]))

    def test_non_scalar_root(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GraphError):
            (x * 2.0).backward()

    def test_repeated_backward(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = tsum(x * x)
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()

    def test_cycle_detected(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 2.0
        z = tsum(y)
        y._parents = (x, z)  # corrupt the graph deliberately
        with pytest.raises(GraphError):
            z.backward()

    def test_composite_chain(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 6, 6)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        b = Tensor(rng.normal(size=3))
        gamma, beta = Tensor(rng.normal(1, 0.1, 3)), Tensor(rng.normal(size=3))
        head = Tensor(rng.normal(size=(1, 27)))

        def f():
            h = conv2d(x, w, b, stride=1, pad=1)
            h = leaky_relu(h, 0.2)
            h, _ = maxpool(h, 3, 2, 1)
            h = batchnorm(h, gamma, beta, np.zeros(3), np.ones(3), training=False)[0]
            logits = linear(h.reshape(1, -1), head)
            p = clamp(activate(logits, "sigmoid"), 1e-7, 1 - 1e-7)
            return -tsum(log(p)) + norm(concat([h.reshape(-1), logits.reshape(-1)]))

        assert grad_check(f, [x, w, b, gamma, beta, head], step=1e-6) <= 1e-4


class TestGradCheck:
    def test_linear_case_is_exact(self, rng):
        assert grad_check(lambda t: tsum(t), Tensor(rng.normal(size=(2, 3, 4, 4)))) <= 1e-10

    def test_conv_leaky_sum(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 6, 6)))
        w = rng.normal(size=(2, 2, 3, 3))
        pre = conv2d(x, Tensor(w), pad=1).data
        assert np.min(np.abs(pre)) > 1e-3  # no ties within the step

        def f(t):
            return tsum(leaky_relu(conv2d(t, Tensor(w), pad=1), 0.2))

        assert grad_check(f, x) <= 1e-4

    def test_non_scalar(self):
        with pytest.raises(GraphError):
            grad_check(lambda t: t * 2.0, Tensor([1.0, 2.0]))


class TestAdam:
    def test_zero_gradient_is_identity(self, rng):
        p = {"w": Tensor(rng.normal(size=(3, 3)))}
        before = p["w"].data.copy()
        state = AdamState.for_params(p)
        adam_step(p, {"w": np.zeros((3, 3))}, state)
        np.testing.assert_array_equal(p["w"].data, before)

    def test_single_step(self):
        p = {"p": Tensor([1.0])}
        state = AdamState.for_params(p)
        adam_step(p, {"p": np.array([0.5])}, state)
        assert p["p"].data[0] == pytest.approx(1 - 0.0002 * 0.5 / (0.5 + 1e-8), abs=1e-15)
        assert state.step_count == 1

    def test_two_steps_hand_unrolled(self):
        g, lr, b1, b2, eps = 0.5, 0.0002, 0.5, 0.999, 1e-8
        p = {"p": Tensor([1.0])}
        state = AdamState.for_params(p)
        adam_step(p, {"p": np.array([g])}, state)
        after_one = p["p"].data[0]
        adam_step(p, {"p": np.array([g])}, state)
        m2 = b1 * (1 - b1) * g + (1 - b1) * g
        v2 = b2 * (1 - b2) * g * g + (1 - b2) * g * g
        step2 = lr * (m2 / (1 - b1 ** 2)) / (math.sqrt(v2 / (1 - b2 ** 2)) + eps)
        assert abs((after_one - p["p"].data[0]) - step2) <= 1e-12

    def test_non_finite_gradient_skips(self):
        p = {"p": Tensor([1.0])}
        state = AdamState.for_params(p)
        assert adam_step(p, {"p": np.array([np.nan])}, state) is False
        assert p["p"].data[0] == 1.0 and state.step_count == 0

    def test_shape_mismatch(self):
        p = {"p": Tensor([1.0])}
        with pytest.raises(ConfigError):
            adam_step(p, {"p": np.zeros(2)}, AdamState.for_params(p))


class TestPurity:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_forward_ops_bitwise_repeatable(self, seed):
        r = np.random.default_rng(seed)
        x = Tensor(r.normal(size=(2, 2, 6, 6)))
        w = Tensor(r.normal(size=(3, 2, 3, 3)))
        gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))

        def run():
            h = conv2d(x, w, pad=1)
            h = batchnorm(h, gamma, beta, np.zeros(3), np.ones(3), training=True)[0]
            h = maxpool(leaky_relu(h), 3, 2, 1)[0]
            return conv_transpose2d(h, w, stride=2, pad=1).data

        assert np.array_equal(run(), run())

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(5, 9))
    def test_maxpool_window_overlap(self, z, s, size):
        x = np.random.default_rng(size).permutation(size * size).reshape(1, 1, size, size).astype(float)
        if z > size:
            return
        out, _ = maxpool(Tensor(x), z, s)
        ho = out.shape[2]
        # count how many windows contain each input cell along one axis
        cover = np.zeros(size, dtype=int)
        for i in range(ho):
            cover[i * s:i * s + z] += 1
        if s >= z:
            assert cover.max() <= 1
        elif ho > 1:
            assert cover.max() >= 2


def test_grad_check_skips_coordinates_that_cross_a_kink():
    x = Tensor(np.array([1e-5, -2e-5, 0.5, -0.5, 3e-5]))
    f = lambda t: tsum(activate(t, "relu") * 3.0)
    naive = grad_check_report(f, x, step=1e-4)
    assert naive.max_error > 0.1 and naive.skipped == 0
    report = grad_check_report(f, x, step=1e-4, skip_kinks=True)
    assert report.skipped == 3 and report.checked == 2
    assert report.max_error <= 1e-8
