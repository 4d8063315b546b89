"""
Checking reverse-mode gradients against finite differences
==========================================================

The tensor core records every operation on a tape when one of its inputs
is watched.  Walking the tape backwards gives the gradient of a scalar
loss with respect to each watched tensor.  Here we build the shallowest
autoencoder (two convolutions, two transposed convolutions) on a tiny
8 x 8 input and compare its analytic gradients with central differences.
"""

import numpy as np

from convae.model import ArchitectureSpec, build, forward
from convae.tensor import Tensor
from convae.training import loss_and_gradients, loss_J

# A narrow network on an 8 x 8 grid keeps the finite-difference loop cheap.
arch = ArchitectureSpec.desk(8, input_shape=(8, 8, 1))
params = build(1, np.random.default_rng(0), arch)
x = Tensor(np.random.default_rng(1).random((1, 8, 8, 1)))

# One backward pass gives every gradient at once.
(mse, mae, sd, J), grads = loss_and_gradients(params, x, n_features=8)
print(f"J = {J:.6f}  (mse {mse:.4f}, mae {mae:.4f}, std {sd:.4f})")


# Central differences need two forward passes per scalar weight.
def numeric_gradient(key, h=1e-5):
    base = params.tensors()[key].numpy()
    out = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        jp = loss_J(x, forward(params.with_tensors({key: Tensor(plus)}), x)[0], 8).total
        jm = loss_J(x, forward(params.with_tensors({key: Tensor(minus)}), x)[0], 8).total
        out[idx] = (jp - jm) / (2 * h)
    return out


for key in params.tensors():
    num = numeric_gradient(key)
    err = np.max(np.abs(grads[key] - num) / np.maximum(np.abs(num), 1e-6))
    print(f"{key:8s} shape {str(grads[key].shape):16s} max relative error {err:.2e}")
