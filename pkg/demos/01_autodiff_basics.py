"""Tour of the tensor core: build a small computation, backpropagate, and
confirm the gradients against central finite differences."""

import numpy as np

import igformer.tensor as T
from igformer.gradcheck import numeric_grad

rng = np.random.default_rng(0)

# a tiny two-layer computation: softmax(x @ w) weighted by a fixed mask
x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = T.Tensor(rng.normal(size=(4, 4)), requires_grad=True)
mask = T.Tensor(rng.normal(size=(3, 4)))

loss = (T.softmax_rows(T.matmul(x, w)) * mask).sum()
loss.backward()
print(f"loss = {float(loss.data):.6f}")
print(f"x.grad row 0: {np.round(x.grad[0], 4)}")

# the same derivative, measured by perturbing x and rerunning the forward pass
def forward():
    return float((T.softmax_rows(T.matmul(T.Tensor(x.data), T.Tensor(w.data)))
                  * mask).sum().data)

fd = numeric_grad(forward, x.data)
err = np.abs(fd - x.grad).max()
print(f"max |finite difference - backward| = {err:.2e}")

# layer norm, GELU and cross entropy carry gradients too
h = T.layer_norm(T.matmul(x, w), T.Tensor(np.ones(4), requires_grad=True),
                 T.Tensor(np.zeros(4), requires_grad=True))
ce = T.cross_entropy(T.gelu(h), [0, 1, 2])
ce.backward()
print(f"cross entropy over 3 rows = {float(ce.data):.6f}")

# the optimizer is plain Nesterov SGD on raw arrays
wdata = np.array([1.0])
velocity = np.zeros(1)
T.sgd_nesterov_step([wdata], [np.array([1.0])], [velocity], lr=0.1, momentum=0.9)
print(f"one Nesterov step from w=1 with g=1: w={wdata[0]:.4f} (expected 0.81)")
