"""Reverse-mode autodiff on numpy arrays, checked against finite differences.

Run:  python demos/01_autodiff_and_gradcheck.py
"""

import numpy as np

from doclearn import gradcheck
from doclearn.tensor import Tensor, backward, finite_difference_grad, matmul, relative_error, relu, tsum

rng = np.random.default_rng(0)
w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
x = Tensor(rng.normal(size=(4, 5)))


def loss_of(wt):
    return tsum(relu(matmul(x, wt)))


loss = loss_of(w)
backward(loss)
numeric = finite_difference_grad(loss_of, Tensor(w.data.copy()))
print("loss", float(loss.data))
print("relative error of the analytic gradient:", relative_error(w.grad, numeric))

# the packaged checks cover the compactness loss, cross-entropy and every
# trainable layer of a small backbone
for check in gradcheck.run_all(seed=0, quick=True):
    print(check.line())
