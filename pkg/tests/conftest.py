"""Shared fixtures and the finite-difference gradient checker."""

import numpy as np
import pytest

from ppgn import tensor as T
from ppgn.data import generate_world

FD_STEP = 1e-3
FD_TOL = 1e-4


def fd_gradcheck(build_loss, tensors, h=FD_STEP, tol=FD_TOL):
    """Compare analytic gradients of a scalar against central differences.

    ``build_loss`` re-evaluates the scalar from the current tensor values.
    Must run under float64 (see ``T.using_dtype``); the relative error uses
    a unit floor so near-zero gradients are compared absolutely.
    """
    for t in tensors:
        t.zero_grad()
    build_loss().backward()
    worst = 0.0
    for x in tensors:
        flat = x.data.reshape(-1)
        grad = np.zeros(flat.size) if x.grad is None else x.grad.reshape(-1)
        with T.no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                plus = build_loss().item()
                flat[i] = orig - h
                minus = build_loss().item()
                flat[i] = orig
                numeric = (plus - minus) / (2 * h)
                err = abs(grad[i] - numeric) / max(1.0, abs(grad[i]), abs(numeric))
                worst = max(worst, err)
    assert worst < tol, f"finite-difference mismatch: {worst:.3g} >= {tol}"
    return worst


@pytest.fixture(scope="session")
def small_world():
    """A 60-scene world shared by data/pipeline tests."""
    return generate_world(60, seed=11)
