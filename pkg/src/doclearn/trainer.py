"""DOC fine-tuning: composite-loss SGD on a reference and a target stream.

Both streams run through the same :class:`~doclearn.model.Model`, so the
reference branch (cross-entropy on the head) and the target branch
(compactness of the feature layer) always see identical weights.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import BatchStream, Dataset, DatasetError
from .losses import LossBundle, compactness, composite, cross_entropy
from .model import Model
from .tensor import NonFiniteError, Tensor, flatten

logger = logging.getLogger(__name__)

VARIANTS = ("two-branch", "memory-efficient")
WEIGHTINGS = ("match-joint", "paper-average")
OBJECTIVES = ("composite", "compactness-only")
TAPS = ("features", "logits")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.1
    learning_rate: float = 5e-5
    weight_decay: float = 5e-4
    iterations: int = 700
    batch_size_target: int = 32
    batch_size_reference: int = 32
    seed: int = 0
    variant: str = "two-branch"
    memeff_weighting: str = "match-joint"
    # "compactness-only" drops the reference branch entirely
    objective: str = "composite"
    loss_tap: str = "features"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.batch_size_target < 2:
            raise ValueError("target batches need at least 2 samples")
        if self.batch_size_reference < 1:
            raise ValueError("batch_size_reference must be positive")
        for name, value, allowed in (
            ("variant", self.variant, VARIANTS),
            ("memeff_weighting", self.memeff_weighting, WEIGHTINGS),
            ("objective", self.objective, OBJECTIVES),
            ("loss_tap", self.loss_tap, TAPS),
        ):
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {value!r}")


@dataclass
class TrainLog:
    """One record per iteration.  ``epoch`` counts passes over the target set."""

    lam: float
    records: list[dict] = field(default_factory=list)

    FIELDS = ("iteration", "epoch", "l_D", "l_C", "l", "feature_norm", "dead_fraction")

    def append(self, iteration: int, epoch: float, bundle: LossBundle, feature_norm: float, dead_fraction: float) -> None:
        self.records.append(
            {
                "iteration": iteration,
                "epoch": epoch,
                "l_D": bundle.descriptive,
                "l_C": bundle.compact,
                "l": bundle.total,
                "feature_norm": feature_norm,
                "dead_fraction": dead_fraction,
            }
        )

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def to_csv(self, path, config: dict | None = None) -> None:
        """Write ``# key=value`` config lines, then a CSV table."""
        with open(path, "w", newline="") as fh:
            for key, value in sorted((config or {}).items()):
                fh.write(f"# {key}={value}\n")
            writer = csv.DictWriter(fh, fieldnames=self.FIELDS, lineterminator="\n")
            writer.writeheader()
            for r in self.records:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_log_csv(path) -> list[dict]:
    with open(path) as fh:
        rows = [line for line in fh if not line.startswith("#")]
    return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(rows)]


# ---------------------------------------------------------------------------


def _tap(feats: Tensor, logits: Tensor, cfg: TrainConfig) -> Tensor:
    return flatten(feats) if cfg.loss_tap == "features" else logits


def _diagnostics(feats: np.ndarray) -> tuple[float, float]:
    f = feats.reshape(feats.shape[0], -1)
    return float(np.linalg.norm(f, axis=1).mean()), float(np.mean(np.all(f == 0, axis=0)))


def _sgd(model: Model, grads: list[np.ndarray], cfg: TrainConfig) -> None:
    for t, g in zip(model.trainable_tensors(), grads):
        t.data = t.data - cfg.learning_rate * (g + cfg.weight_decay * t.data)


def _grads(model: Model) -> list[np.ndarray]:
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in model.trainable_tensors()]


def _compact_loss(model: Model, tgt_x, cfg, start: int) -> tuple[Tensor, np.ndarray]:
    feats, logits = model.forward(tgt_x, start)
    return compactness(_tap(feats, logits, cfg)), feats.data


def _step(model: Model, ref_x, ref_y, tgt_x, cfg: TrainConfig, start: int = 0) -> tuple[LossBundle, np.ndarray]:
    # inputs are activations entering layer ``start`` (raw images when 0)
    model.zero_grad()
    if cfg.objective == "compactness-only":
        l_c, feats = _compact_loss(model, tgt_x, cfg, start)
        l_c.backward()
        _sgd(model, _grads(model), cfg)
        return composite(0.0, l_c.item(), 1.0), feats
    if cfg.variant == "two-branch":
        l_d = cross_entropy(model.forward(ref_x, start)[1], ref_y)
        l_c, feats = _compact_loss(model, tgt_x, cfg, start)
        (l_d + cfg.lam * l_c).backward()
        grads = _grads(model)
    else:
        # one core network, two sequential passes, gradients combined afterwards
        l_d = cross_entropy(model.forward(ref_x, start)[1], ref_y)
        l_d.backward()
        g_d = _grads(model)
        model.zero_grad()
        l_c, feats = _compact_loss(model, tgt_x, cfg, start)
        l_c.backward()
        g_c = _grads(model)
        w_d = 1.0 if cfg.memeff_weighting == "match-joint" else 1.0 - cfg.lam
        grads = [w_d * a + cfg.lam * b for a, b in zip(g_d, g_c)]
    _sgd(model, grads, cfg)
    return composite(l_d.item(), l_c.item(), cfg.lam), feats


def train_step(model: Model, ref_batch, tgt_batch, cfg: TrainConfig) -> LossBundle:
    """One simultaneous reference/target step; updates ``model`` in place.

    ``ref_batch`` is ``(images, labels)``; ``tgt_batch`` is images only.
    """
    tgt_x = np.asarray(tgt_batch)
    if tgt_x.shape[0] < 2:
        raise DatasetError("target batch needs at least 2 samples")
    try:
        bundle, _ = _step(model, ref_batch[0], ref_batch[1], tgt_x, cfg)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite value during training step: {exc}") from exc
    return bundle


def train_step_memeff(model: Model, ref_batch, tgt_batch, cfg: TrainConfig) -> LossBundle:
    return train_step(model, ref_batch, tgt_batch, replace(cfg, variant="memory-efficient"))


def train(model: Model, reference: Dataset | None, target: Dataset, cfg: TrainConfig) -> tuple[Model, TrainLog]:
    """Run ``cfg.iterations`` steps on seeded, per-epoch reshuffled streams.

    Returns a trained copy; the input model is left untouched.  The frozen
    prefix is evaluated once per dataset up front since it cannot change.
    """
    model = model.copy()
    log = TrainLog(cfg.lam)
    if cfg.iterations == 0:
        return model, log
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    tgt_stream = BatchStream(target, cfg.batch_size_target, seed=seeds[1], min_batch=2)
    start = min(model.trainable_start, model.feature_end)
    tgt_act = _prefix_all(model, target.images)
    ref_iter = None
    if cfg.objective == "composite":
        if reference is None or len(reference) == 0:
            raise DatasetError("composite training needs a non-empty reference dataset")
        if reference.num_classes != model.num_classes:
            raise DatasetError(f"reference has {reference.num_classes} classes, model head has {model.num_classes}")
        ref_iter = BatchStream(reference, cfg.batch_size_reference, seed=seeds[0]).indices()
        ref_act = _prefix_all(model, reference.images)
    tgt_iter = tgt_stream.indices()
    per_epoch = tgt_stream.batches_per_epoch
    for it in range(cfg.iterations):
        tgt_x = tgt_act[next(tgt_iter)]
        ref_x = ref_y = None
        if ref_iter is not None:
            idx = next(ref_iter)
            ref_x, ref_y = ref_act[idx], reference.labels[idx]
        try:
            bundle, feats = _step(model, ref_x, ref_y, tgt_x, cfg, start)
        except NonFiniteError as exc:
            last = log.records[-1] if log.records else {}
            raise TrainingDiverged(f"iteration {it}: {exc}; last record {last}") from exc
        log.append(it, (it + 1) / per_epoch, bundle, *_diagnostics(feats))
    model.metadata = dict(model.metadata, iterations=int(model.metadata.get("iterations", 0)) + cfg.iterations, lam=cfg.lam)
    return model, log


def _prefix_all(model: Model, images: np.ndarray, batch: int = 512) -> np.ndarray:
    return np.concatenate([model.prefix(images[i : i + batch]) for i in range(0, len(images), batch)])


def pretrain_reference(
    model: Model,
    reference: Dataset,
    epochs: int,
    lr: float = 0.05,
    seed: int = 0,
    batch_size: int = 32,
    weight_decay: float = 5e-4,
) -> tuple[Model, TrainLog]:
    """Plain cross-entropy training of every layer on the reference set.

    The result stands in for pre-trained weights: afterwards only the
    model's original trainable layers are marked trainable again.
    """
    if reference.num_classes < 2 or len(np.unique(reference.labels)) < 2:
        raise DatasetError("pretraining needs a reference set with at least 2 classes")
    if reference.num_classes != model.num_classes:
        raise DatasetError(f"reference has {reference.num_classes} classes, model head has {model.num_classes}")
    model = model.copy()
    log = TrainLog(0.0)
    if epochs == 0:
        return model, log
    keep = model.trainable
    model.set_trainable(list(model.params))
    cfg = TrainConfig(lam=0.0, learning_rate=lr, weight_decay=weight_decay, seed=seed)
    stream = BatchStream(reference, batch_size, seed=seed)
    batches = iter(stream)
    steps = epochs * stream.batches_per_epoch
    for it in range(steps):
        x, y = next(batches)
        model.zero_grad()
        try:
            feats, logits = model.forward(x)
            loss = cross_entropy(logits, y)
            loss.backward()
        except NonFiniteError as exc:
            raise TrainingDiverged(f"pretraining iteration {it}: {exc}") from exc
        _sgd(model, _grads(model), cfg)
        log.append(it, (it + 1) / stream.batches_per_epoch, composite(loss.item(), 0.0, 0.0), *_diagnostics(feats.data))
    model.set_trainable(keep)
    model.zero_grad()
    model.metadata = dict(model.metadata, pretrain_epochs=epochs, pretrain_lr=lr)
    return model, log


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def write_log(log: TrainLog, path, config: dict | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    log.to_csv(path, config)
