"""
Reverse-mode gradients on a tape
================================

Every model in the package is built from a small set of array ops recorded
on a tape. This walk-through checks a gradient by hand, against central
differences, and runs a Hessian-vector product.
"""

import numpy as np

from gme import ops
from gme.gradcheck import finite_diff_grad, hvp_fd
from gme.tape import Tape

rng = np.random.default_rng(0)
x = rng.normal(size=(5, 4))
y = (rng.random(5) < 0.5).astype(float)

# a one-layer logistic model: loss = BCE(sigmoid(x w), y)
def loss_and_grad(w):
    t = Tape()
    leaf = t.leaf(w, "w")
    loss = ops.bce(ops.sigmoid(ops.matmul(t.const(x), leaf)), y)
    return float(loss.value), t.backward(loss)["w"]

w = rng.normal(size=4)
value, grad = loss_and_grad(w)
print("loss", round(value, 6))

# the closed form for this model is x^T (p - y) / n
p = 1 / (1 + np.exp(-x @ w))
print("tape    ", np.round(grad, 8))
print("by hand ", np.round(x.T @ (p - y) / len(y), 8))
print("central ", np.round(finite_diff_grad(lambda v: loss_and_grad(v)[0], w), 8))

# curvature along a direction, from two extra gradient calls
v = np.array([1.0, 0.0, 0.0, 0.0])
H = x.T @ np.diag(p * (1 - p)) @ x / len(y)
print("Hv fd   ", np.round(hvp_fd(lambda u: loss_and_grad(u)[1], w, v), 6))
print("Hv exact", np.round(H @ v, 6))
