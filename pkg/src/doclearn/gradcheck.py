"""Invariant checks comparing analytic gradients against finite differences.

Each check returns a :class:`Check` with the measured error and the
tolerance it was held to.  ``perturb`` scales every analytic gradient by
``1 + perturb``; it exists so the harness itself can be shown to fail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import compactness, compactness_backward, compactness_forward, cross_entropy
from .model import Model, build, desk_backbone
from .tensor import Tensor, backward, finite_difference_grad, flatten, no_grad, relative_error


@dataclass(frozen=True)
class Check:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max error {self.error:.3e} (tolerance {self.tolerance:.0e})"


def compactness_gradient(seed: int = 0, trials: int = 50, perturb: float = 0.0, tolerance: float = 1e-8) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in (2, 4, 8):
        for k in (1, 16, 64):
            for _ in range(trials):
                x = rng.normal(size=(n, k))
                fd = finite_difference_grad(lambda t: compactness_forward(t.data), Tensor(x))
                worst = max(worst, relative_error((1 + perturb) * compactness_backward(x), fd))
    return Check("compactness gradient vs central differences", worst, tolerance)


def variance_identity(seed: int = 0, trials: int = 100, tolerance: float = 1e-12) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, k = int(rng.integers(2, 17)), int(rng.integers(1, 65))
        x = rng.normal(size=(n, k))
        lc = compactness_forward(x)
        sigma2 = np.mean(np.sum((x - x.mean(axis=0)) ** 2, axis=1))
        worst = max(worst, abs(lc - n**2 / (k * (n - 1) ** 2) * sigma2) / lc)
    return Check("compactness equals scaled sample variance", worst, tolerance)


def cross_entropy_gradient(seed: int = 0, perturb: float = 0.0, tolerance: float = 1e-8) -> Check:
    rng = np.random.default_rng(seed)
    logits, labels = rng.normal(size=(6, 5)), rng.integers(0, 5, size=6)
    t = Tensor(logits, requires_grad=True)
    backward(cross_entropy(t, labels))
    fd = finite_difference_grad(lambda z: cross_entropy(z, labels), Tensor(logits))
    return Check("cross-entropy gradient vs central differences", relative_error((1 + perturb) * t.grad, fd), tolerance)


def composite_loss(model: Model, ref_x, ref_y, tgt_x, lam: float) -> Tensor:
    l_d = cross_entropy(model.logits(ref_x), ref_y)
    return l_d + lam * compactness(flatten(model.features(tgt_x)))


def backbone_gradients(
    seed: int = 0,
    image_size: int = 8,
    num_classes: int = 4,
    feature_dim: int = 64,
    hidden: int = 128,
    lam: float = 0.1,
    perturb: float = 0.0,
    tolerance: float = 1e-5,
) -> list[Check]:
    """Composite-loss gradient of every trainable parameter of the desk backbone."""
    rng = np.random.default_rng(seed)
    model = build(desk_backbone(num_classes, feature_dim, hidden), (1, image_size, image_size), seed=seed)
    ref_x = rng.random((6, 1, image_size, image_size))
    ref_y = np.arange(6) % num_classes
    tgt_x = rng.random((4, 1, image_size, image_size))
    model.zero_grad()
    backward(composite_loss(model, ref_x, ref_y, tgt_x, lam))
    checks = []
    for name in model.trainable:
        for part, t in zip(("weight", "bias"), model.params[name]):
            analytic = (1 + perturb) * t.grad
            saved = t.data

            def loss_at(p, t=t):
                t.data = p.data
                with no_grad():
                    return composite_loss(model, ref_x, ref_y, tgt_x, lam)

            fd = finite_difference_grad(loss_at, Tensor(saved))
            t.data = saved
            checks.append(Check(f"composite loss gradient {name}.{part}", relative_error(analytic, fd), tolerance))
    return checks


def run_all(seed: int = 0, perturb: float = 0.0, tolerance: float = 1e-6, quick: bool = False) -> list[Check]:
    """The full suite; ``quick`` shrinks trial counts and backbone widths."""
    trials = 5 if quick else 50
    width = dict(feature_dim=16, hidden=32) if quick else {}
    checks = [
        compactness_gradient(seed, trials, perturb, min(tolerance, 1e-8)),
        variance_identity(seed),
        cross_entropy_gradient(seed, perturb, min(tolerance, 1e-8)),
    ]
    checks += backbone_gradients(seed, perturb=perturb, tolerance=tolerance, **width)
    return checks
