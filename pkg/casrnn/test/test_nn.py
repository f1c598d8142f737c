import unittest

import numpy as np

from casrnn import nn
from casrnn.nn import Param, StateError
from casrnn.numerics import ShapeError


# relative error bound of every analytic/numeric gradient comparison
TOLERANCE = 1e-4
INSTANCES = 20


def wrap(x):
    return Param(np.array(x, dtype=np.float64))


class GradientCheck(unittest.TestCase):
    def assertGradient(self, f, param, analytic, what):
        numeric = nn.numerical_gradient(f, param)
        err = nn.relative_error(analytic, numeric)
        self.assertLessEqual(err, TOLERANCE,
                             "{}: relative error {:.3g}".format(what, err))


class GruGradients(GradientCheck):
    def test_step(self):
        for seed in range(INSTANCES):
            with self.subTest(seed=seed):
                rng = np.random.default_rng(seed)
                p = nn.GruParams(3, 4, rng)
                x = wrap(rng.normal(size=3))
                h = wrap(rng.normal(size=4))
                c = rng.normal(size=4)

                def f():
                    return float(np.sum(c*nn.gru_step(p, x.value,
                                                      h.value)[0]))

                nn.zero_grads(p.params())
                _, cache = nn.gru_step(p, x.value, h.value)
                d_x, d_h = nn.gru_step_backward(p, cache, c)
                for name, param in p.named_params():
                    self.assertGradient(f, param, param.grad.copy(), name)
                self.assertGradient(f, x, d_x, "x")
                self.assertGradient(f, h, d_h, "h_prev")

    def test_sequence(self):
        for seed in range(INSTANCES):
            with self.subTest(seed=seed):
                rng = np.random.default_rng(100 + seed)
                p = nn.GruParams(2, 3, rng)
                seq = [wrap(rng.normal(size=2)) for _ in range(5)]
                c = rng.normal(size=3)

                def f():
                    h, _ = nn.gru_forward(p, [x.value for x in seq])
                    return float(np.sum(c*h))

                nn.zero_grads(p.params())
                _, trace = nn.gru_forward(p, [x.value for x in seq])
                d_inputs = nn.gru_backward(p, trace, c)
                for name, param in p.named_params():
                    self.assertGradient(f, param, param.grad.copy(), name)
                for t, (x, d_x) in enumerate(zip(seq, d_inputs)):
                    self.assertGradient(f, x, d_x, "x[{}]".format(t))

    def test_sequence_batch(self):
        rng = np.random.default_rng(7)
        p = nn.GruParams(2, 3, rng)
        seq = [wrap(rng.normal(size=(4, 2))) for _ in range(5)]
        c = rng.normal(size=(4, 3))

        def f():
            h, _ = nn.gru_forward(p, [x.value for x in seq])
            return float(np.sum(c*h))

        nn.zero_grads(p.params())
        _, trace = nn.gru_forward(p, [x.value for x in seq])
        d_inputs = nn.gru_backward(p, trace, c)
        for name, param in p.named_params():
            self.assertGradient(f, param, param.grad.copy(), name)
        self.assertGradient(f, seq[0], d_inputs[0], "x[0]")


class LayerGradients(GradientCheck):
    def test_head(self):
        for seed in range(INSTANCES):
            with self.subTest(seed=seed):
                rng = np.random.default_rng(200 + seed)
                h = nn.OutputHead(5, 3, rng)
                h.b_o.value[...] = rng.normal(size=3)
                feat = wrap(rng.normal(size=(2, 5)))
                c = rng.normal(size=(2, 3))

                def f():
                    return float(np.sum(c*nn.head_forward(h, feat.value)))

                nn.zero_grads(h.params())
                d_f = nn.head_backward(h, feat.value, c)
                for name, param in h.named_params():
                    self.assertGradient(f, param, param.grad.copy(), name)
                self.assertGradient(f, feat, d_f, "f")

    def test_cross_entropy(self):
        for seed in range(INSTANCES):
            with self.subTest(seed=seed):
                rng = np.random.default_rng(300 + seed)
                logits = wrap(rng.normal(size=4))
                label = int(rng.integers(4))
                _, d = nn.cross_entropy(logits.value, label)
                self.assertGradient(
                    lambda: nn.cross_entropy(logits.value, label)[0],
                    logits, d, "logits")

                batch = wrap(rng.normal(size=(3, 4)))
                labels = rng.integers(4, size=3)
                _, d = nn.cross_entropy(batch.value, labels)
                self.assertGradient(
                    lambda: nn.cross_entropy(batch.value, labels)[0],
                    batch, d, "batch logits")

    def test_conv(self):
        for seed in range(INSTANCES):
            with self.subTest(seed=seed):
                rng = np.random.default_rng(400 + seed)
                layer = nn.ConvLayer(2, 3, 3, 2, rng)
                layer.bias.value[...] = rng.normal(size=3)
                x = wrap(rng.normal(size=(2, 2, 6, 5)))
                c = rng.normal(size=(2, 3, 4, 4))

                def f():
                    return float(np.sum(c*nn.conv_forward(layer, x.value)[0]))

                nn.zero_grads(layer.params())
                _, cache = nn.conv_forward(layer, x.value)
                d_x = nn.conv_backward(layer, cache, c)
                self.assertGradient(f, layer.kernel, layer.kernel.grad.copy(),
                                    "kernel")
                self.assertGradient(f, layer.bias, layer.bias.grad.copy(),
                                    "bias")
                self.assertGradient(f, x, d_x, "x")

    def test_pool(self):
        for seed in range(INSTANCES):
            with self.subTest(seed=seed):
                rng = np.random.default_rng(500 + seed)
                layer = nn.PoolLayer(2)
                x = wrap(rng.normal(size=(3, 4, 6)))
                c = rng.normal(size=(3, 2, 3))

                def f():
                    return float(np.sum(c*nn.pool_forward(layer, x.value)[0]))

                _, cache = nn.pool_forward(layer, x.value)
                self.assertGradient(f, x, nn.pool_backward(layer, cache, c),
                                    "x")


class GruProperties(unittest.TestCase):
    def test_gates_and_interpolation(self):
        # 100 parameter draws, each with a batch of 100 (x, h_prev) draws
        rng = np.random.default_rng(11)
        for _ in range(100):
            p = nn.GruParams(3, 5, rng)
            for param in p.params():
                param.value *= 3.0
            x = rng.normal(scale=2.0, size=(100, 3))
            h_prev = rng.uniform(-1.0, 1.0, size=(100, 5))
            h, cache = nn.gru_step(p, x, h_prev)
            for gate in (cache.u, cache.r):
                self.assertTrue(np.all((gate >= 0.0) & (gate <= 1.0)))
            lo = np.minimum(h_prev, cache.h_tilde)
            hi = np.maximum(h_prev, cache.h_tilde)
            self.assertTrue(np.all(h >= lo - 1e-12))
            self.assertTrue(np.all(h <= hi + 1e-12))

    def test_zero_params(self):
        p = nn.GruParams(2, 3)
        h, cache = nn.gru_step(p, [1.0, -2.0], [0.4, 0.0, -0.4])
        np.testing.assert_array_equal(cache.u, [0.5]*3)
        np.testing.assert_array_equal(cache.h_tilde, [0.0]*3)
        np.testing.assert_allclose(h, [0.2, 0.0, -0.2])

    def test_hand_computed(self):
        p = nn.GruParams(1, 1)
        p.W_u.value[...] = 1.0
        p.W.value[...] = 1.0
        p.V.value[...] = 1.0
        h, cache = nn.gru_step(p, [1.0], [1.0])
        self.assertAlmostEqual(cache.u[0], 0.73106, places=5)
        self.assertEqual(cache.r[0], 0.5)
        self.assertAlmostEqual(cache.h_tilde[0], 0.90515, places=5)
        self.assertAlmostEqual(h[0], 0.93068, delta=1e-4)

    def test_saturated_update_gate(self):
        rng = np.random.default_rng(12)
        p = nn.GruParams(2, 4, rng)
        p.W_u.value[...] = 1e3
        p.V_u.value[...] = 0.0
        h, cache = nn.gru_step(p, [1.0, 1.0], rng.uniform(-1.0, 1.0, 4))
        np.testing.assert_allclose(h, cache.h_tilde, rtol=0, atol=1e-6)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        p = nn.GruParams(2, 4, rng)
        seq = rng.normal(size=(6, 3, 2))
        h_batch, _ = nn.gru_forward(p, seq)
        for b in range(3):
            h, _ = nn.gru_forward(p, seq[:, b])
            np.testing.assert_allclose(h_batch[b], h)

    def test_shapes(self):
        p = nn.GruParams(2, 3)
        with self.assertRaises(ShapeError):
            nn.gru_step(p, np.zeros(3), np.zeros(3))
        with self.assertRaises(ShapeError):
            nn.gru_step(p, np.zeros(2), np.zeros(4))
        with self.assertRaises(ShapeError):
            nn.gru_step(p, np.zeros((2, 2)), np.zeros((3, 3)))
        with self.assertRaises(ValueError):
            nn.gru_forward(p, [])
        with self.assertRaises(ValueError):
            nn.GruParams(0, 3)

    def test_foreign_trace(self):
        rng = np.random.default_rng(0)
        p = nn.GruParams(1, 2, rng)
        q = nn.GruParams(1, 2, rng)
        _, trace = nn.gru_forward(p, np.ones((3, 1)))
        with self.assertRaises(StateError):
            nn.gru_backward(q, trace, np.ones(2))

    def test_gradients_accumulate(self):
        rng = np.random.default_rng(1)
        p = nn.GruParams(2, 3, rng)
        _, trace = nn.gru_forward(p, rng.normal(size=(4, 2)))
        nn.gru_backward(p, trace, np.ones(3))
        once = [param.grad.copy() for param in p.params()]
        nn.gru_backward(p, trace, np.ones(3))
        for g1, param in zip(once, p.params()):
            np.testing.assert_allclose(param.grad, 2*g1)


class Layers(unittest.TestCase):
    def test_cross_entropy_values(self):
        loss, d = nn.cross_entropy([0.0, 0.0], 1)
        self.assertAlmostEqual(loss, np.log(2.0))
        np.testing.assert_allclose(d, [0.5, -0.5])
        loss, d = nn.cross_entropy([[0.0, 0.0], [0.0, 0.0]], [0, 1])
        self.assertAlmostEqual(loss, np.log(2.0))
        np.testing.assert_allclose(d, [[-0.25, 0.25], [0.25, -0.25]])
        with self.assertRaises(ValueError):
            nn.cross_entropy([0.0, 0.0], 2)
        with self.assertRaises(ValueError):
            nn.cross_entropy([0.0, 0.0], -1)

    def test_conv_values(self):
        layer = nn.ConvLayer(1, 1, 2, 2)
        layer.kernel.value[...] = 1.0
        layer.bias.value[...] = 0.5
        x = np.arange(16.0).reshape(1, 4, 4)
        out, _ = nn.conv_forward(layer, x)
        self.assertEqual(out.shape, (1, 3, 3))
        self.assertEqual(out[0, 0, 0], 0 + 1 + 4 + 5 + 0.5)
        self.assertEqual(out[0, 2, 2], 10 + 11 + 14 + 15 + 0.5)
        self.assertEqual(layer.output_size(4), 3)
        with self.assertRaises(ShapeError):
            layer.output_size(1)
        with self.assertRaises(ShapeError):
            nn.conv_forward(layer, np.zeros((2, 4, 4)))
        with self.assertRaises(ShapeError):
            nn.conv_forward(layer, np.zeros((1, 1, 1)))

    def test_conv_batch(self):
        rng = np.random.default_rng(2)
        layer = nn.ConvLayer(2, 3, 2, 3, rng)
        x = rng.normal(size=(4, 2, 5, 6))
        out, _ = nn.conv_forward(layer, x)
        self.assertEqual(out.shape, (4, 3, 4, 4))
        for i in range(4):
            np.testing.assert_allclose(out[i], nn.conv_forward(layer, x[i])[0])

    def test_pool_ties(self):
        layer = nn.PoolLayer(2)
        x = np.array([[[1.0, 3.0], [3.0, 0.0]]])
        out, cache = nn.pool_forward(layer, x)
        np.testing.assert_array_equal(out, [[[3.0]]])
        d_x = nn.pool_backward(layer, cache, np.array([[[2.0]]]))
        np.testing.assert_array_equal(d_x, [[[0.0, 2.0], [0.0, 0.0]]])

    def test_pool_shapes(self):
        layer = nn.PoolLayer(2)
        x = np.arange(32.0).reshape(2, 4, 4)
        out, _ = nn.pool_forward(layer, x)
        np.testing.assert_array_equal(out[0], [[5.0, 7.0], [13.0, 15.0]])
        with self.assertRaises(ShapeError):
            nn.pool_forward(layer, np.zeros((1, 5, 5)))
        with self.assertRaises(ShapeError):
            layer.output_size(3)

    def test_activation_forward(self):
        np.testing.assert_allclose(nn.activation_forward("tanh", [0.0]), [0.0])
        with self.assertRaises(ValueError):
            nn.activation_forward("relu", [0.0])


class Sgd(unittest.TestCase):
    def test_step(self):
        p = Param([1.0, 2.0])
        p.grad[...] = [10.0, -10.0]
        nn.sgd_step([p], nn.SgdConfig(learning_rate=0.1))
        np.testing.assert_allclose(p.value, [0.0, 3.0])
        np.testing.assert_array_equal(p.grad, [0.0, 0.0])

    def test_config(self):
        with self.assertRaises(ValueError):
            nn.SgdConfig(learning_rate=-1.0)
        with self.assertRaises(ValueError):
            nn.SgdConfig(batch_size=0)
        with self.assertRaises(ValueError):
            nn.SgdConfig(epochs=-1)
        with self.assertLogs("casrnn.nn", "WARNING"):
            nn.SgdConfig(learning_rate=0.0)

    def test_zero_lr_keeps_params(self):
        p = Param([1.0, 2.0])
        p.grad[...] = 5.0
        nn.sgd_step([p], nn.SgdConfig(learning_rate=0.0, epochs=1))
        np.testing.assert_array_equal(p.value, [1.0, 2.0])

    def test_minibatches(self):
        batches = nn.minibatches(10, 4, nn.epoch_rng(0, 0))
        self.assertEqual([len(b) for b in batches], [4, 4, 2])
        self.assertEqual(sorted(np.concatenate(batches)), list(range(10)))
        again = nn.minibatches(10, 4, nn.epoch_rng(0, 0))
        for a, b in zip(batches, again):
            np.testing.assert_array_equal(a, b)
        other = np.concatenate(nn.minibatches(10, 4, nn.epoch_rng(0, 1)))
        self.assertFalse(np.array_equal(np.concatenate(batches), other))


class FiniteDifferences(unittest.TestCase):
    def test_numerical_gradient(self):
        p = Param([[1.0, 2.0], [3.0, -1.0]])
        g = nn.numerical_gradient(lambda: float(np.sum(p.value**3)), p)
        np.testing.assert_allclose(g, 3*p.value**2, rtol=1e-6)
        # the parameter is restored
        np.testing.assert_array_equal(p.value, [[1.0, 2.0], [3.0, -1.0]])

    def test_relative_error(self):
        self.assertEqual(nn.relative_error([1.0, 2.0], [1.0, 2.0]), 0.0)
        self.assertEqual(nn.relative_error([0.0], [0.0]), 0.0)
        self.assertAlmostEqual(nn.relative_error([1.0], [-1.0]), 1.0)
