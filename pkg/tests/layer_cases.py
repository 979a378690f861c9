"""Randomised small instances of every layer kind for gradient checking.

Each generator returns ``(build, arrays)`` for :func:`helpers.check_grads`.
"""

import numpy as np

from leafnet import functional as F
from leafnet.tensor import Tensor, relu


def conv2d_case(rng):
    n, c, co = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
    k = int(rng.choice([1, 2, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h = int(rng.integers(k, k + 3))
    x = rng.standard_normal((n, c, h, h + 1))
    w = rng.standard_normal((co, c, k, k))
    b = rng.standard_normal(co)
    return (lambda x, w, b: F.conv2d(x, w, b, stride, pad)), [x, w, b]


def batchnorm_train_case(rng):
    c = int(rng.integers(1, 3))
    x = rng.standard_normal((int(rng.integers(2, 4)), c, 2, 3))
    gamma, beta = rng.uniform(0.5, 1.5, c), rng.standard_normal(c)

    def build(x, g, b):
        return F.batch_norm2d(x, g, b, np.zeros(c), np.ones(c), training=True)

    return build, [x, gamma, beta]


def batchnorm_eval_case(rng):
    c = int(rng.integers(1, 3))
    x = rng.standard_normal((2, c, 2, 2))
    mean, var = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)

    def build(x, g, b):
        return F.batch_norm2d(x, g, b, mean.copy(), var.copy(), training=False)

    return build, [x, rng.uniform(0.5, 1.5, c), rng.standard_normal(c)]


def relu_case(rng):
    # keep values away from the kink where the derivative is undefined
    x = rng.uniform(0.1, 1.0, (3, 4)) * rng.choice([-1, 1], (3, 4))
    return relu, [x]


def maxpool_case(rng):
    k, s, p = [(2, 2, 0), (3, 2, 1), (2, 1, 0)][int(rng.integers(0, 3))]
    h = int(rng.integers(k, k + 3))
    # distinct values so the argmax is stable under the finite-difference step
    x = rng.permutation(2 * h * h).reshape(1, 2, h, h) * 0.1 + rng.uniform(0, 0.01)
    return (lambda x: F.max_pool2d(x, k, s, p)), [x]


def avgpool_case(rng):
    return F.adaptive_avg_pool2d, [rng.standard_normal((2, 3, 3, 2))]


def linear_case(rng):
    n, i, o = rng.integers(1, 4, size=3)
    return F.linear, [rng.standard_normal((n, i)), rng.standard_normal((o, i)), rng.standard_normal(o)]


def softmax_case(rng):
    return (lambda z: F.softmax(z, axis=1)), [rng.standard_normal((3, 4)) * 3]


def log_softmax_case(rng):
    return (lambda z: F.log_softmax(z, axis=1)), [rng.standard_normal((3, 4)) * 3]


def cross_entropy_case(rng):
    n, c = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    labels = rng.integers(0, c, n)
    return (lambda z: F.cross_entropy(z, labels)), [rng.standard_normal((n, c)) * 2]


def basicblock_case(rng):
    """Composite: conv -> bn(train) -> relu -> conv -> bn plus a projection shortcut."""
    c_in, c_out = 2, 3
    x = rng.standard_normal((2, c_in, 4, 4))
    w1 = rng.standard_normal((c_out, c_in, 3, 3)) * 0.5
    w2 = rng.standard_normal((c_out, c_out, 3, 3)) * 0.5
    wd = rng.standard_normal((c_out, c_in, 1, 1))
    ones, zeros = np.ones(c_out), np.zeros(c_out)

    def bn(t):
        return F.batch_norm2d(t, Tensor(ones, dtype=np.float64), Tensor(zeros, dtype=np.float64),
                              np.zeros(c_out), np.ones(c_out), training=True)

    def build(x, w1, w2, wd):
        h = relu(bn(F.conv2d(x, w1, None, 2, 1)))
        return bn(F.conv2d(h, w2, None, 1, 1)) + bn(F.conv2d(x, wd, None, 2, 0))

    return build, [x, w1, w2, wd]


LAYER_CASES = {
    "conv2d": conv2d_case,
    "batchnorm2d_train": batchnorm_train_case,
    "batchnorm2d_eval": batchnorm_eval_case,
    "relu": relu_case,
    "maxpool2d": maxpool_case,
    "adaptiveavgpool2d": avgpool_case,
    "linear": linear_case,
    "softmax": softmax_case,
    "log_softmax": log_softmax_case,
    "cross_entropy": cross_entropy_case,
    "basicblock": basicblock_case,
}
