"""Shared test fixtures and the finite-difference gradient oracle."""
from __future__ import annotations

import numpy as np
import pytest

from pvseg.tensor import Tape, Tensor, backward

REL_TOL_PRIMITIVE = 1e-4
REL_TOL_END2END = 1e-3
FD_EPS = 1e-5
ABS_FLOOR = 1e-7


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def numeric_grad(fn, arrays: list[np.ndarray], eps: float = FD_EPS) -> list[np.ndarray]:
    """Central finite differences of a scalar-valued fn over f64 arrays.

    fn receives plain ndarrays and must return a python float; it must not
    use the autodiff machinery, so this is an independent oracle.
    """
    grads = []
    for which, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = base.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(*arrays)
            flat[i] = orig - eps
            lo = fn(*arrays)
            flat[i] = orig
            gf[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def autodiff_grad(build, arrays: list[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Run build(*tensors) -> scalar Tensor under a tape; return loss and grads."""
    tensors = [Tensor(a, dtype=np.float64, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(*tensors)
    backward(loss, tape, params=tensors)
    return loss.data.item(), [t.grad.copy() for t in tensors]


def assert_grads_close(build, fn, arrays: list[np.ndarray],
                       rel_tol: float = REL_TOL_PRIMITIVE) -> None:
    """Compare reverse-mode gradients of build against finite differences of fn.

    build composes Tensor ops; fn is the same computation over plain ndarrays.
    Relative error uses an absolute floor so near-zero entries do not blow up
    the ratio.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    _, got = autodiff_grad(build, arrays)
    want = numeric_grad(fn, arrays)
    for g, w in zip(got, want):
        denom = np.maximum(np.maximum(np.abs(g), np.abs(w)), ABS_FLOOR)
        rel = np.abs(g - w) / denom
        bad = np.abs(g - w) > ABS_FLOOR
        rel = np.where(bad, rel, 0.0)
        assert rel.max() <= rel_tol, f"max rel err {rel.max():.3e} exceeds {rel_tol}"
