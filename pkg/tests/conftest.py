"""Shared test utilities: the central finite-difference gradient oracle."""

import numpy as np
import pytest

from moeforge.ndcore import Tensor, backward, no_grad


def finite_difference_grad(f, param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued f() w.r.t. `param`.

    Evaluates only the forward path (under no_grad), so it is independent
    of the backward rules it is used to check.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fplus = float(f().data)
            flat[i] = orig - eps
            fminus = float(f().data)
            flat[i] = orig
            gflat[i] = (fplus - fminus) / (2.0 * eps)
    return grad


def check_gradients(f, params, rtol: float = 1e-4, atol: float = 1e-6):
    """Assert analytic gradients of scalar f() match central differences."""
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    for p in params:
        numeric = finite_difference_grad(f, p)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
