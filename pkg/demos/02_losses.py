"""Compactness and descriptiveness losses.

The compactness loss is the mean squared distance of each feature to the
mean of the other features in the batch, divided by the feature width.  It
equals a fixed multiple of the batch variance.

Run:  python demos/02_losses.py
"""

import numpy as np

from doclearn.losses import compactness_backward, compactness_forward, composite, cross_entropy, softmax
from doclearn.tensor import Tensor

rng = np.random.default_rng(1)
n, k = 8, 16
feats = rng.normal(size=(n, k))

lc = compactness_forward(feats)
variance = np.mean(np.sum((feats - feats.mean(axis=0)) ** 2, axis=1))
print(f"compactness {lc:.6f}  variance identity {n * n / (k * (n - 1) ** 2) * variance:.6f}")

# a tighter batch has a smaller loss, and the gradient points away from the mean
tight = feats.mean(axis=0) + 0.1 * (feats - feats.mean(axis=0))
print(f"compactness after shrinking toward the mean: {compactness_forward(tight):.6f}")
g = compactness_backward(feats)
print("gradient is parallel to x - mean:", np.allclose(g, 2 * n / (k * (n - 1) ** 2) * (feats - feats.mean(axis=0))))

logits = rng.normal(size=(6, 4))
labels = [0, 1, 2, 3, 0, 1]
ld = float(cross_entropy(Tensor(logits), labels).data)
print(f"cross-entropy {ld:.4f}  (check {-np.mean(np.log(softmax(logits)[np.arange(6), labels])):.4f})")
print("composite with lambda 0.1:", composite(ld, lc, 0.1))
