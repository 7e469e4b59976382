"""Template matching on learned features.

Templates are features of a few target training images.  An image scores
the distance to its nearest template; it is accepted when the score is at
most a threshold.

Run:  python demos/04_templates_and_scoring.py
"""

import numpy as np

from doclearn import desk
from doclearn import model as M
from doclearn.classifier import classify, generate_templates, score_images
from doclearn.data import split
from doclearn.evaluation import auc
from doclearn.trainer import pretrain_reference

data, reference = desk.task()
target_train, target_test = split(data.of_class(desk.TARGET), 0.5, seed=0)
alien = data.of_class(desk.ALIEN)

w0 = M.build(M.desk_backbone(reference.num_classes), reference.image_shape, seed=0)
w0, _ = pretrain_reference(w0, reference, epochs=3, lr=0.05, seed=0)

templates = generate_templates(w0, target_train, count=20, seed=0)
pos = score_images(w0, target_test.images, templates)
neg = score_images(w0, alien.images[: len(pos)], templates)
print(f"median score: target {np.median(pos):.3f}, alien {np.median(neg):.3f}")

scores = np.r_[pos, neg]
truth = np.r_[np.ones(len(pos), int), np.zeros(len(neg), int)]
print(f"AUC {auc(scores, truth):.3f}")

delta = float(np.quantile(pos, 0.9))
decisions = classify(scores, delta)
print(f"threshold {delta:.3f}: accepts {decisions[truth == 1].mean():.0%} of targets, {decisions[truth == 0].mean():.0%} of aliens")
