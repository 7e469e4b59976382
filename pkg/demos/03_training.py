"""Pretrain a reference network, then fine-tune it with the composite loss.

The frozen prefix is checked to be untouched, and the memory-efficient
variant is run side by side with the two-branch one.

Run:  python demos/03_training.py
"""

import numpy as np

from doclearn import desk
from doclearn import model as M
from doclearn.trainer import TrainConfig, pretrain_reference, train, train_step, train_step_memeff

data, reference = desk.task()
target = data.of_class(desk.TARGET)

w0 = M.build(M.desk_backbone(reference.num_classes), reference.image_shape, seed=0)
w0, pre_log = pretrain_reference(w0, reference, epochs=3, lr=0.05, seed=0)
print(f"pretraining: {len(pre_log.records)} steps, final cross-entropy {pre_log.records[-1]['l_D']:.3f}")

cfg = TrainConfig(learning_rate=0.01, iterations=100, batch_size_target=10_000, batch_size_reference=10_000)
tuned, log = train(w0, reference, target, cfg)
for rec in log.records[::20]:
    print(f"iter {rec['iteration']:4d}  l_D {rec['l_D']:.4f}  l_C {rec['l_C']:.4f}  l {rec['l']:.4f}")

print("frozen layers:", w0.frozen, "trainable:", w0.trainable)
print("frozen prefix unchanged:", w0.frozen_hash() == tuned.frozen_hash())

a, b = w0.copy(), w0.copy()
ref_batch = (reference.images[:32], reference.labels[:32])
for _ in range(10):
    train_step(a, ref_batch, target.images[:16], cfg)
    train_step_memeff(b, ref_batch, target.images[:16], cfg)
gap = max(float(np.max(np.abs(a.state()[k] - b.state()[k]))) for k in a.state())
print(f"two-branch vs memory-efficient max parameter gap after 10 steps: {gap:.1e}")
