"""Test the rectifier network, its analytic gradients, Adam and the model binary format"""
import logging
import os
import tempfile
from unittest import TestCase

import numpy as np

from opeselect.funcapprox import (MODEL_MAGIC, MlpModel, ShapeError, adam_init, adam_step,
                                  backward, forward, forward_with_cache, grad, load_model,
                                  loss_and_grad, mlp_init, model_from_bytes, model_to_bytes,
                                  save_model)

logging.basicConfig(level=logging.INFO)


def _numeric_gradients(model, x, t, w, eps=1e-6):
    """Central finite differences of the loss for every parameter"""
    out = []
    for params in (model.weights, model.biases):
        layer_grads = []
        for p in params:
            g = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + eps
                up = loss_and_grad(model, x, t, w)[0]
                p[idx] = old - eps
                down = loss_and_grad(model, x, t, w)[0]
                p[idx] = old
                g[idx] = (up - down) / (2 * eps)
            layer_grads.append(g)
        out.append(layer_grads)
    return out


class TestForward(TestCase):
    """Test mlp_init() and forward()"""

    def test_init_deterministic(self):
        """The same sizes and seed give the same parameters"""
        a = mlp_init((3, 5, 2), seed=4)
        b = mlp_init((3, 5, 2), seed=4)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)
        assert a.weights[0].shape == (5, 3)
        assert a.biases[1].shape == (2,)
        assert not np.array_equal(a.weights[0], mlp_init((3, 5, 2), seed=5).weights[0])

    def test_init_errors(self):
        """Too few layers or a non-positive width is a ShapeError"""
        with self.assertRaises(ShapeError):
            mlp_init((3,), seed=0)
        with self.assertRaises(ShapeError):
            mlp_init((3, 0, 2), seed=0)

    def test_forward_hand_computed(self):
        """A one-hidden-layer network evaluated by hand"""
        model = MlpModel((2, 2, 1),
                         [np.array([[1.0, 0.0], [0.0, -1.0]]), np.array([[2.0, 3.0]])],
                         [np.array([0.0, 0.5]), np.array([1.0])])
        # hidden = relu([1, -2 + 0.5]) = [1, 0]; out = 2 * 1 + 1
        np.testing.assert_allclose(forward(model, np.array([1.0, 2.0])), [3.0])
        np.testing.assert_allclose(forward(model, np.array([[1.0, 2.0], [0.0, 0.0]])),
                                   [[3.0], [2.5]])

    def test_forward_shapes(self):
        """Vectors give vectors, batches give batches, bad widths raise"""
        model = mlp_init((4, 3, 2), seed=1)
        assert forward(model, np.zeros(4)).shape == (2,)
        assert forward(model, np.zeros((6, 4))).shape == (6, 2)
        with self.assertRaises(ShapeError):
            forward(model, np.zeros(3))
        with self.assertRaises(ShapeError):
            forward(model, np.zeros((2, 2, 4)))

    def test_copy_independent(self):
        """copy() shares no parameter arrays"""
        model = mlp_init((2, 3, 1), seed=0)
        clone = model.copy()
        clone.weights[0][0, 0] += 1.0
        assert model.weights[0][0, 0] != clone.weights[0][0, 0]


class TestGradients(TestCase):
    """Test loss_and_grad() against finite differences"""

    def test_gradient_check_random_networks(self):
        """Analytic gradients match central differences on 100 random small networks"""
        rng = np.random.default_rng(2024)
        worst = 0.0
        for k in range(100):
            depth = int(rng.integers(1, 3))
            sizes = [int(rng.integers(1, 5))]
            sizes += [int(rng.integers(1, 6)) for _ in range(depth)]
            sizes += [int(rng.integers(1, 5))]
            model = mlp_init(sizes, seed=k)
            for b in model.biases:
                b[:] = rng.normal(0.0, 0.1, size=b.shape)
            x = rng.normal(size=(5, sizes[0]))
            t = rng.normal(size=(5, sizes[-1]))
            w = rng.uniform(0.0, 1.0, size=(5, sizes[-1]))
            _, analytic = loss_and_grad(model, x, t, w)
            numeric_w, numeric_b = _numeric_gradients(model, x, t, w)
            for a, n in zip(analytic.weights + analytic.biases, numeric_w + numeric_b):
                err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
                worst = max(worst, float(np.max(err)))
        assert worst < 1e-4, worst

    def test_zero_weights_mask_outputs(self):
        """Outputs with zero weight contribute neither loss nor gradient"""
        model = mlp_init((3, 4, 2), seed=3)
        x = np.ones((2, 3))
        w = np.array([[1.0, 0.0], [1.0, 0.0]])
        t1 = np.array([[0.5, 100.0], [0.5, -100.0]])
        t2 = np.array([[0.5, 0.0], [0.5, 0.0]])
        l1, g1 = loss_and_grad(model, x, t1, w)
        l2, g2 = loss_and_grad(model, x, t2, w)
        assert l1 == l2
        for a, b in zip(g1.weights, g2.weights):
            np.testing.assert_array_equal(a, b)

    def test_loss_value(self):
        """Loss is half the mean over rows of the weighted squared error"""
        model = MlpModel((1, 1), [np.array([[0.0]])], [np.array([0.0])])
        loss, _ = loss_and_grad(model, np.zeros((2, 1)), np.array([[1.0], [3.0]]),
                                np.ones((2, 1)))
        assert loss == 0.5 * (1.0 + 9.0) / 2

    def test_grad_shape_errors(self):
        """Mismatched targets or weights raise ShapeError"""
        model = mlp_init((2, 3, 2), seed=0)
        with self.assertRaises(ShapeError):
            grad(model, np.zeros((4, 2)), np.zeros((4, 3)), np.zeros((4, 3)))
        with self.assertRaises(ShapeError):
            grad(model, np.zeros((4, 2)), np.zeros((4, 2)), np.zeros((3, 2)))

    def test_backward_matches_loss_and_grad(self):
        """backward() with the squared-error output gradient reproduces grad()"""
        model = mlp_init((3, 4, 2), seed=8)
        x = np.random.default_rng(0).normal(size=(6, 3))
        t = np.zeros((6, 2))
        w = np.ones((6, 2))
        out, cache = forward_with_cache(model, x)
        manual = backward(model, cache, w * (out - t) / 6)
        reference = grad(model, x, t, w)
        for a, b in zip(manual.weights + manual.biases, reference.weights + reference.biases):
            np.testing.assert_allclose(a, b)


class TestAdam(TestCase):
    """Test adam_init() and adam_step()"""

    def test_step_counter_and_purity(self):
        """Each step increases the counter by one and leaves its inputs untouched"""
        model = mlp_init((2, 3, 1), seed=0)
        before = [w.copy() for w in model.weights]
        state = adam_init(model, step_size=1e-2)
        g = grad(model, np.ones((4, 2)), np.ones((4, 1)), np.ones((4, 1)))
        new_model, new_state = adam_step(model, g, state)
        assert state.step == 0 and new_state.step == 1
        for w, b in zip(model.weights, before):
            np.testing.assert_array_equal(w, b)
        assert not np.array_equal(new_model.weights[0], model.weights[0])

    def test_first_step_size(self):
        """The first bias-corrected step moves every parameter by about the step size"""
        model = MlpModel((1, 1), [np.array([[1.0]])], [np.array([0.0])])
        state = adam_init(model, step_size=0.1)
        g = grad(model, np.array([[1.0]]), np.array([[0.0]]), np.array([[1.0]]))
        new_model, _ = adam_step(model, g, state)
        np.testing.assert_allclose(new_model.weights[0], [[0.9]], rtol=1e-6)
        np.testing.assert_allclose(new_model.biases[0], [-0.1], rtol=1e-6)

    def test_fits_quadratic(self):
        """Full-batch Adam fits y = x^2 on [-1, 1]"""
        x = np.linspace(-1.0, 1.0, 64)[:, None]
        y = x ** 2
        w = np.ones_like(y)
        model = mlp_init((1, 32, 32, 1), seed=0)
        state = adam_init(model, step_size=1e-2)
        first, _ = loss_and_grad(model, x, y, w)
        for _ in range(1000):
            loss, g = loss_and_grad(model, x, y, w)
            model, state = adam_step(model, g, state)
        final, _ = loss_and_grad(model, x, y, w)
        assert final < 0.1 * first, (first, final)

    def test_shape_mismatch(self):
        """Gradients of another architecture are rejected"""
        model = mlp_init((2, 3, 1), seed=0)
        other = mlp_init((2, 4, 1), seed=0)
        g = grad(other, np.ones((1, 2)), np.ones((1, 1)), np.ones((1, 1)))
        with self.assertRaises(ShapeError):
            adam_step(model, g, adam_init(model))


class TestModelFormat(TestCase):
    """Test model_to_bytes() / model_from_bytes() and the file helpers"""

    def test_bytes_exact(self):
        """A parsed blob reproduces every parameter bit for bit"""
        model = mlp_init((3, 7, 4), seed=11)
        blob = model_to_bytes(model)
        assert blob[:4] == MODEL_MAGIC
        restored = model_from_bytes(blob)
        assert restored.layer_sizes == (3, 7, 4)
        for a, b in zip(model.weights + model.biases, restored.weights + restored.biases):
            np.testing.assert_array_equal(a, b)
        assert model_to_bytes(restored) == blob

    def test_bad_blobs(self):
        """Bad magic, unknown version and truncation raise ShapeError"""
        blob = model_to_bytes(mlp_init((2, 2), seed=0))
        with self.assertRaises(ShapeError):
            model_from_bytes(b'XXXX' + blob[4:])
        with self.assertRaises(ShapeError):
            model_from_bytes(blob[:4] + (99).to_bytes(4, 'little') + blob[8:])
        with self.assertRaises(ShapeError):
            model_from_bytes(blob[:-8])

    def test_short_blobs(self):
        """Blobs cut inside the header or the size table raise ShapeError"""
        blob = model_to_bytes(mlp_init((2, 3, 2), seed=0))
        for cut in (4, 6, 11, 12, 17):
            with self.assertRaises(ShapeError):
                model_from_bytes(blob[:cut])
        with self.assertRaises(ShapeError):
            model_from_bytes(MODEL_MAGIC)

    def test_file_round_trip(self):
        """save_model() and load_model() go through the same format"""
        model = mlp_init((2, 3, 2), seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'm.orlm')
            save_model(model, path)
            restored = load_model(path)
        x = np.array([[0.3, -0.7]])
        np.testing.assert_array_equal(forward(model, x), forward(restored, x))
