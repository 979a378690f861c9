"""Finite-difference gradient checking shared by the test modules."""

import numpy as np

from leafnet.tensor import Tensor

H = 1e-5

# (status, criterion, detail) rows filled by test_acceptance and printed by conftest
ACCEPTANCE_LOG = []


def numeric_grad(f, arrays, index, h=H):
    """Central difference of scalar ``f(*arrays)`` w.r.t. ``arrays[index]`` (float64, in place)."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = f(*arrays)
        x[i] = orig - h
        down = f(*arrays)
        x[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return np.linalg.norm(a - b) / scale


def check_grads(build, arrays, weights=None):
    """Compare tape gradients of ``sum(build(*tensors) * weights)`` to central differences.

    ``build`` maps float64 Tensors to an output Tensor. Returns the worst
    relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*tensors)
    if weights is None:
        weights = np.random.default_rng(12345).standard_normal(out.shape)
    w = Tensor(weights, dtype=np.float64)
    (out * w).sum().backward()

    def scalar(*arrs):
        ts = [Tensor(a, dtype=np.float64) for a in arrs]
        return float((build(*ts).data * weights).sum())

    worst = 0.0
    for k, t in enumerate(tensors):
        num = numeric_grad(scalar, arrays, k)
        worst = max(worst, rel_error(t.grad.data, num))
    return worst
