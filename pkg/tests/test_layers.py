import numpy as np
import pytest

from glu_ctc.errors import NotDivisibleError, ShapeMismatch
from glu_ctc.nn import layers as L
from glu_ctc.nn.model import Adam

from conftest import numeric_grad, rel_error

TOL = 1e-4


def check_grads(forward, backward, inputs, rng, step=1e-6):
    """FD-check ``backward`` for the scalar ``sum(forward(*inputs) * R)``.

    ``backward(R, cache)`` must return one gradient per entry of ``inputs``
    (``None`` entries are skipped).
    """
    out, cache = forward(*inputs)
    proj = rng.normal(size=out.shape)
    analytic = backward(proj, cache)
    for x, g in zip(inputs, analytic):
        if g is None:
            continue
        num = numeric_grad(lambda: float((forward(*inputs)[0] * proj).sum()), x, step)
        assert rel_error(g, num) < TOL


class TestConv:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 1, 5, 6))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        y, _ = L.conv2d_same_forward(x, w, np.zeros(1))
        np.testing.assert_array_equal(y, x)

    def test_zero_input_gives_bias(self):
        y, _ = L.conv2d_same_forward(np.zeros((1, 2, 4, 4)), np.ones((3, 2, 3, 3)),
                                     np.array([1.0, -2.0, 0.5]))
        np.testing.assert_array_equal(y[0, :, 2, 2], [1.0, -2.0, 0.5])

    def test_matches_direct_convolution(self, rng):
        x = rng.normal(size=(1, 2, 4, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        y, _ = L.conv2d_same_forward(x, w, b)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for t in range(4):
                for m in range(5):
                    ref = (xp[0, :, t:t + 3, m:m + 3] * w[o]).sum() + b[o]
                    assert y[0, o, t, m] == pytest.approx(ref, abs=1e-12)

    def test_preserves_time_and_freq(self, rng):
        y, _ = L.conv2d_same_forward(rng.normal(size=(2, 3, 7, 8)), rng.normal(size=(4, 3, 3, 3)),
                                     np.zeros(4))
        assert y.shape == (2, 4, 7, 8)

    def test_gradients(self, rng):
        x = rng.normal(size=(2, 2, 5, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        check_grads(L.conv2d_same_forward, L.conv2d_same_backward, [x, w, b], rng)

    def test_shape_errors(self, rng):
        with pytest.raises(ShapeMismatch):
            L.conv2d_same_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
        with pytest.raises(ShapeMismatch):
            L.conv2d_same_forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)), np.zeros(1))


class TestGLU:
    def test_zero_gate_halves_linear_path(self, rng):
        x = rng.normal(size=(1, 1, 6, 6))
        w = rng.normal(size=(2, 1, 3, 3))
        y, _ = L.glu_forward(x, w, np.zeros_like(w), np.zeros(2), np.zeros(2))
        lin, _ = L.conv2d_same_forward(x, w, np.zeros(2))
        np.testing.assert_allclose(y, 0.5 * lin)

    def test_closed_gate_blocks(self, rng):
        x = rng.normal(size=(1, 1, 6, 6))
        w = rng.normal(size=(2, 1, 3, 3))
        y, _ = L.glu_forward(x, w, np.zeros_like(w), np.zeros(2), np.full(2, -800.0))
        np.testing.assert_allclose(y, 0.0, atol=1e-300)

    def test_gradients(self, rng):
        x = rng.normal(size=(2, 1, 6, 6))
        w, v = rng.normal(size=(2, 2, 1, 3, 3))
        b, c = rng.normal(size=(2, 2))

        def backward(dy, cache):
            return L.glu_backward(dy, cache)

        check_grads(L.glu_forward, backward, [x, w, v, b, c], rng)

    def test_relu_gradients(self, rng):
        x = rng.normal(size=(2, 1, 5, 4))
        w = rng.normal(size=(2, 1, 3, 3))
        b = rng.normal(size=2)
        check_grads(L.conv_relu_forward, L.conv_relu_backward, [x, w, b], rng)


class TestPool:
    def test_factor_one_is_identity(self, rng):
        x = rng.normal(size=(1, 2, 3, 4))
        y, cache = L.freq_max_pool_forward(x, 1)
        np.testing.assert_array_equal(y, x)
        np.testing.assert_array_equal(L.freq_max_pool_backward(x, cache), x)

    def test_pools_frequency_only(self):
        x = np.array([1.0, 3.0, 2.0, 2.0, -1.0, -4.0]).reshape(1, 1, 1, 6)
        y, cache = L.freq_max_pool_forward(x, 2)
        assert y.ravel().tolist() == [3.0, 2.0, -1.0]
        # a tie routes its gradient to the first maximal bin
        dx = L.freq_max_pool_backward(np.ones_like(y), cache)
        assert dx.ravel().tolist() == [0.0, 1.0, 1.0, 0.0, 1.0, 0.0]

    def test_time_preserved(self, rng):
        y, _ = L.freq_max_pool_forward(rng.normal(size=(2, 3, 11, 8)), 2)
        assert y.shape == (2, 3, 11, 4)

    def test_not_divisible(self):
        with pytest.raises(NotDivisibleError):
            L.freq_max_pool_forward(np.zeros((1, 1, 2, 5)), 2)

    def test_gradients(self, rng):
        x = rng.normal(size=(2, 2, 3, 8))
        check_grads(lambda a: L.freq_max_pool_forward(a, 2),
                    lambda dy, cache: (L.freq_max_pool_backward(dy, cache),), [x], rng)


class TestDropout:
    def test_inference_is_identity(self, rng):
        x = rng.normal(size=(3, 4))
        y, cache = L.dropout_forward(x, 0.5, None)
        assert y is x and cache is None

    def test_scaling_keeps_mean(self):
        x = np.ones(200000)
        y, _ = L.dropout_forward(x, 0.2, np.random.default_rng(0))
        assert set(np.unique(y)) <= {0.0, 1.25}
        assert abs(y.mean() - 1.0) < 0.01


class TestGRU:
    def params(self, rng, d, h):
        return (rng.normal(size=(d, 3 * h)) * 0.5, rng.normal(size=(h, 3 * h)) * 0.5,
                rng.normal(size=3 * h) * 0.1)

    def test_zero_weights_give_zero_state(self, rng):
        zero = (np.zeros((3, 6)), np.zeros((2, 6)), np.zeros(6))
        y, _ = L.bgru_forward(rng.normal(size=(1, 5, 3)), zero, zero)
        np.testing.assert_array_equal(y, 0.0)

    def test_output_shape(self, rng):
        y, _ = L.bgru_forward(rng.normal(size=(2, 5, 3)), self.params(rng, 3, 2),
                              self.params(rng, 3, 2))
        assert y.shape == (2, 5, 4)

    def test_reversal_symmetry_with_tied_weights(self, rng):
        p = self.params(rng, 3, 2)
        x = rng.normal(size=(1, 5, 3))
        y, _ = L.bgru_forward(x, p, p)
        y_rev, _ = L.bgru_forward(x[:, ::-1], p, p)
        np.testing.assert_allclose(y[:, :, :2], y_rev[:, ::-1, 2:], atol=1e-12)

    def test_single_step_matches_equations(self, rng):
        wx, uh, b = self.params(rng, 3, 2)
        x = rng.normal(size=(1, 1, 3))
        y, _ = L.gru_forward(x, wx, uh, b)
        pre = x[0, 0] @ wx + b
        z, n = L.sigmoid(pre[:2]), np.tanh(pre[4:])
        np.testing.assert_allclose(y[0, 0], z * n, atol=1e-12)

    def test_gradients(self, rng):
        x = rng.normal(size=(2, 5, 3))
        fw, bw = self.params(rng, 3, 2), self.params(rng, 3, 2)

        def forward(x, *flat):
            return L.bgru_forward(x, flat[:3], flat[3:])

        def backward(dy, cache):
            dx, g_fw, g_bw = L.bgru_backward(dy, cache)
            return (dx, *g_fw, *g_bw)

        check_grads(forward, backward, [x, *fw, *bw], rng)


class TestHeads:
    def test_dense_gradients(self, rng):
        check_grads(L.dense_forward, L.dense_backward,
                    [rng.normal(size=(2, 4, 3)), rng.normal(size=(3, 5)), rng.normal(size=5)], rng)

    def test_zero_logits(self):
        probs = L.softmax(np.zeros((3, 21)))
        np.testing.assert_allclose(probs, 1 / 21)
        np.testing.assert_array_equal(L.sigmoid(np.zeros(4)), 0.5)

    def test_softmax_rows_sum_to_one(self, rng):
        probs = L.softmax(rng.normal(size=(4, 7, 9)) * 30)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0)

    def test_gmp_gap_values(self):
        p = np.array([[[0.1, 0.9], [0.7, 0.2], [0.4, 0.4]]])
        np.testing.assert_allclose(L.gmp_forward(p)[0], [[0.7, 0.9]])
        np.testing.assert_allclose(L.gap_forward(p)[0], [[0.4, 0.5]])

    def test_pooling_gradients(self, rng):
        p = rng.uniform(size=(2, 6, 3))
        check_grads(L.gmp_forward, lambda dy, c: (L.gmp_backward(dy, c),), [p], rng)
        check_grads(L.gap_forward, lambda dy, c: (L.gap_backward(dy, c),), [p], rng)

    def test_bce_half(self):
        loss, _ = L.bce_loss(np.full(3, 0.5), np.array([1.0, 0.0, 1.0]))
        assert loss == pytest.approx(np.log(2.0))

    def test_bce_gradient(self, rng):
        pred = rng.uniform(0.05, 0.95, size=6)
        target = (rng.uniform(size=6) > 0.5).astype(float)
        _, grad = L.bce_loss(pred, target)
        num = numeric_grad(lambda: L.bce_loss(pred, target)[0], pred)
        assert rel_error(grad, num) < TOL

    def test_bce_clipping_keeps_loss_finite(self):
        loss, grad = L.bce_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        assert np.isfinite(loss) and np.all(np.isfinite(grad))


class TestAdam:
    def test_zero_gradient_leaves_params(self, rng):
        p = {"w": rng.normal(size=5)}
        before = p["w"].copy()
        Adam().step(p, {"w": np.zeros(5)})
        np.testing.assert_array_equal(p["w"], before)

    def test_first_step_is_lr_times_sign(self, rng):
        g = rng.normal(size=8)
        p = {"w": np.zeros(8)}
        Adam(lr=0.001).step(p, {"w": g})
        np.testing.assert_allclose(p["w"], -0.001 * np.sign(g), rtol=1e-6)

    def test_matches_closed_form(self, rng):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        grads = rng.normal(size=(4, 3))
        p = {"w": np.ones(3)}
        opt = Adam(lr, b1, b2, eps)
        ref, m, v = np.ones(3), np.zeros(3), np.zeros(3)
        for t, g in enumerate(grads, start=1):
            opt.step(p, {"w": g})
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref = ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        np.testing.assert_allclose(p["w"], ref, rtol=1e-12)

    def test_non_finite_gradient_skipped(self):
        p = {"w": np.ones(2)}
        opt = Adam()
        assert opt.step(p, {"w": np.array([np.nan, 1.0])}) is False
        np.testing.assert_array_equal(p["w"], 1.0)
        assert opt.t == 0
