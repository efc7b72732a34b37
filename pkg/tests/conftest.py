"""Shared test helpers: finite-difference gradient oracle and tolerances."""

import numpy as np
import pytest

from rulcast.tensor import Tensor

GRAD_EPS = 1e-5
GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-7


def numeric_grads(build_loss, tensors, eps=GRAD_EPS):
    """Central finite differences of a scalar-producing closure.

    ``build_loss`` must recompute the forward pass from the tensors' current
    data on every call; this keeps the oracle independent of the recorded
    graph it is checking.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            hi = build_loss().item()
            flat[i] = original - eps
            lo = build_loss().item()
            flat[i] = original
            gf[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=GRAD_RTOL, atol=GRAD_ATOL, label=""):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.abs(numeric), atol / rtol)
    rel = np.abs(analytic - numeric) / denom
    worst = float(rel.max()) if rel.size else 0.0
    assert worst <= rtol, (
        f"gradient mismatch{f' [{label}]' if label else ''}: worst relative "
        f"error {worst:.3e} (analytic {analytic.reshape(-1)[np.argmax(rel)]:.6e}, "
        f"numeric {numeric.reshape(-1)[np.argmax(rel)]:.6e})")


def check_gradients(build_loss, tensors, label=""):
    """Backward pass vs central finite differences on every tensor."""
    for t in tensors:
        t.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]
    numeric = numeric_grads(build_loss, tensors)
    for a, n, t in zip(analytic, numeric, tensors):
        assert_grads_close(a, n, label=f"{label} shape={t.shape}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def rand_tensor(rng, shape, scale=1.0, requires_grad=True):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=requires_grad)
