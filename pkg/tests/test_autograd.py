"""Gradient correctness: every primitive against central finite differences."""

import numpy as np
import pytest

from moeforge import ndcore as nd
from moeforge.ndcore import Tensor, backward, no_grad

from conftest import check_gradients


def _param(rng, shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


class TestBackwardContract:
    def test_sum_gives_ones(self, rng):
        w = _param(rng, (3, 4))
        backward(nd.sum_all(w))
        np.testing.assert_allclose(w.grad, np.ones((3, 4)))

    def test_constant_wrt_param_gives_zeros(self, rng):
        w = _param(rng, (5,))
        backward(nd.sum_all(nd.mul_scalar(w, 0.0)))
        np.testing.assert_allclose(w.grad, np.zeros(5))

    def test_rejects_non_scalar(self, rng):
        w = _param(rng, (3,))
        with pytest.raises(ValueError, match="scalar"):
            backward(nd.mul_scalar(w, 2.0))

    def test_fanout_accumulates(self, rng):
        w = _param(rng, (4,))
        loss = nd.sum_all(nd.add(w, w))
        backward(loss)
        np.testing.assert_allclose(w.grad, np.full(4, 2.0))

    def test_repeated_backward_accumulates_into_grad(self, rng):
        w = _param(rng, (2,))
        backward(nd.sum_all(w))
        backward(nd.sum_all(w))
        np.testing.assert_allclose(w.grad, np.full(2, 2.0))

    def test_no_grad_suppresses_recording(self, rng):
        w = _param(rng, (3,))
        with no_grad():
            out = nd.mul_scalar(w, 2.0)
        assert not out.requires_grad
        assert out._inputs is None


class TestPrimitiveGradients:
    """Each op wrapped in a random projection to a scalar, checked by FD."""

    def test_add_and_broadcast(self, rng):
        x = _param(rng, (3, 4))
        b = _param(rng, (4,))
        v = rng.normal(size=(3, 4))
        f = lambda: nd.sum_all(nd.mul(nd.add(x, b), Tensor(v)))
        check_gradients(f, [x, b])

    def test_mul(self, rng):
        a = _param(rng, (4, 3))
        b = _param(rng, (4, 3))
        check_gradients(lambda: nd.sum_all(nd.mul(a, b)), [a, b])

    def test_matmul_2d(self, rng):
        a = _param(rng, (3, 5))
        b = _param(rng, (5, 2))
        v = rng.normal(size=(3, 2))
        f = lambda: nd.sum_all(nd.mul(nd.matmul(a, b), Tensor(v)))
        check_gradients(f, [a, b])

    def test_matmul_nd_by_2d(self, rng):
        a = _param(rng, (2, 3, 4))
        w = _param(rng, (4, 3))
        v = rng.normal(size=(2, 3, 3))
        f = lambda: nd.sum_all(nd.mul(nd.matmul(a, w), Tensor(v)))
        check_gradients(f, [a, w])

    def test_matmul_batched(self, rng):
        a = _param(rng, (2, 3, 4))
        b = _param(rng, (2, 4, 5))
        v = rng.normal(size=(2, 3, 5))
        f = lambda: nd.sum_all(nd.mul(nd.matmul(a, b), Tensor(v)))
        check_gradients(f, [a, b])

    def test_softmax(self, rng):
        x = _param(rng, (4, 6), scale=2.0)
        v = rng.normal(size=(4, 6))
        f = lambda: nd.sum_all(nd.mul(nd.softmax(x), Tensor(v)))
        check_gradients(f, [x])

    def test_sigmoid(self, rng):
        x = _param(rng, (5, 3))
        v = rng.normal(size=(5, 3))
        f = lambda: nd.sum_all(nd.mul(nd.sigmoid(x), Tensor(v)))
        check_gradients(f, [x])

    def test_gelu(self, rng):
        x = _param(rng, (6, 4), scale=2.0)
        v = rng.normal(size=(6, 4))
        f = lambda: nd.sum_all(nd.mul(nd.gelu(x), Tensor(v)))
        check_gradients(f, [x])

    def test_layer_norm(self, rng):
        x = _param(rng, (5, 8), scale=3.0)
        g = Tensor(rng.normal(loc=1.0, scale=0.1, size=8), requires_grad=True)
        b = _param(rng, (8,))
        v = rng.normal(size=(5, 8))
        f = lambda: nd.sum_all(nd.mul(nd.layer_norm(x, g, b), Tensor(v)))
        check_gradients(f, [x, g, b])

    def test_embedding_lookup(self, rng):
        table = _param(rng, (7, 3))
        ids = np.array([0, 3, 3, 6])
        v = rng.normal(size=(4, 3))
        f = lambda: nd.sum_all(nd.mul(nd.embedding_lookup(table, ids), Tensor(v)))
        check_gradients(f, [table])

    def test_concat_and_slice(self, rng):
        a = _param(rng, (2, 3))
        b = _param(rng, (3, 3))
        v = rng.normal(size=(2, 3))
        f = lambda: nd.sum_all(
            nd.mul(nd.slice_axis(nd.concat([a, b], axis=0), 0, 2, 4), Tensor(v))
        )
        check_gradients(f, [a, b])

    def test_masked_zero(self, rng):
        x = _param(rng, (6, 3))
        mask = np.array([True, False, False, True, False, False])
        v = rng.normal(size=(6, 3))
        f = lambda: nd.sum_all(nd.mul(nd.masked_zero(x, mask), Tensor(v)))
        check_gradients(f, [x])

    def test_masked_zero_grad_exactly_zero_in_masked_rows(self, rng):
        x = _param(rng, (6, 3))
        mask = np.array([True, False, False, True, False, False])
        backward(nd.sum_all(nd.masked_zero(x, mask)))
        assert (x.grad[mask] == 0.0).all()
        np.testing.assert_allclose(x.grad[~mask], 1.0)

    def test_scale_rows(self, rng):
        x = _param(rng, (5, 4))
        w = _param(rng, (5,))
        v = rng.normal(size=(5, 4))
        f = lambda: nd.sum_all(nd.mul(nd.scale_rows(x, w), Tensor(v)))
        check_gradients(f, [x, w])

    def test_gather_scatter(self, rng):
        x = _param(rng, (6, 3))
        idx = np.array([1, 1, 4])
        v = rng.normal(size=(6, 3))
        f = lambda: nd.sum_all(
            nd.mul(nd.scatter_rows(nd.gather_rows(x, idx), idx, 6), Tensor(v))
        )
        check_gradients(f, [x])

    def test_gather_elements(self, rng):
        x = _param(rng, (5, 4))
        rows = np.array([0, 2, 2])
        v = rng.normal(size=3)
        f = lambda: nd.sum_all(nd.mul(nd.gather_elements(x, rows, 1), Tensor(v)))
        check_gradients(f, [x])

    def test_normalize_rows(self, rng):
        x = Tensor(rng.uniform(0.1, 1.0, size=(4, 5)), requires_grad=True)
        v = rng.normal(size=(4, 5))
        f = lambda: nd.sum_all(nd.mul(nd.normalize_rows(x), Tensor(v)))
        check_gradients(f, [x])

    def test_reshape_swapaxes(self, rng):
        x = _param(rng, (2, 3, 4))
        v = rng.normal(size=(3, 2, 4))
        f = lambda: nd.sum_all(nd.mul(nd.swapaxes(nd.reshape(x, (2, 3, 4)), 0, 1), Tensor(v)))
        check_gradients(f, [x])

    def test_mean_ops(self, rng):
        x = _param(rng, (4, 5))
        check_gradients(lambda: nd.mean_all(x), [x])
        v = rng.normal(size=5)
        check_gradients(lambda: nd.sum_all(nd.mul(nd.mean_axis(x, 0), Tensor(v))), [x])

    def test_absolute(self, rng):
        # Keep values away from the kink where the subgradient is taken.
        x = Tensor(rng.choice([-1.0, 1.0], size=(4, 3)) * rng.uniform(0.5, 2.0, (4, 3)),
                   requires_grad=True)
        v = rng.normal(size=(4, 3))
        f = lambda: nd.sum_all(nd.mul(nd.absolute(x), Tensor(v)))
        check_gradients(f, [x])


class TestMlpEndToEnd:
    def test_random_two_layer_mlp_matches_fd(self, rng):
        w1 = _param(rng, (6, 8), scale=0.5)
        b1 = _param(rng, (8,), scale=0.1)
        w2 = _param(rng, (8, 3), scale=0.5)
        b2 = _param(rng, (3,), scale=0.1)
        x = Tensor(rng.normal(size=(4, 6)))
        targets = np.array([0, 2, 1, 0])

        def f():
            h = nd.gelu(nd.add(nd.matmul(x, w1), b1))
            logits = nd.add(nd.matmul(h, w2), b2)
            return nd.label_smoothed_cross_entropy(logits, targets, 0.0)

        check_gradients(f, [w1, b1, w2, b2])
