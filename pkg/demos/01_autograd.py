"""Reverse-mode autograd on a numpy tensor, checked against finite differences.

Run: python3 demos/01_autograd.py
"""

import numpy as np

from leafnet import functional as F
from leafnet.tensor import Tensor

rng = np.random.default_rng(0)

# A tiny logistic-regression style graph: matmul, broadcast add, softmax cross-entropy.
x = Tensor(rng.standard_normal((5, 3)), dtype=np.float64)
w = Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=np.float64)
b = Tensor(np.zeros(4), requires_grad=True, dtype=np.float64)
y = np.array([0, 1, 2, 3, 1])

loss = F.cross_entropy(x @ w + b, y)
loss.backward()
print(f"loss {float(loss.data):.6f}")

# Central differences on every weight entry.
eps = 1e-6
numeric = np.zeros_like(w.data)
for idx in np.ndindex(w.shape):
    for sign in (1, -1):
        w2 = w.data.copy()
        w2[idx] += sign * eps
        numeric[idx] += sign * float(F.cross_entropy(x @ Tensor(w2, dtype=np.float64) + b.data, y).data) / (2 * eps)

err = np.abs(numeric - w.grad.data).max() / np.abs(numeric).max()
print(f"max relative gradient error on w: {err:.2e}")

# The bias gradient is the batch mean of softmax - onehot.
probs = F.softmax(x @ w + b, axis=1).data
onehot = np.eye(4)[y]
print("bias grad matches mean(softmax - onehot):", np.allclose(b.grad.data, (probs - onehot).mean(0)))
