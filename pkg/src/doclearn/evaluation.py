"""ROC/AUC/EER with the low-score-is-target convention, and the
one-class-at-a-time protocol runner."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import classifier
from .data import Dataset, DatasetError, filter_overlap, reference_subset, split
from .model import Model, build, desk_backbone
from .trainer import TrainConfig, TrainLog, pretrain_reference, train

logger = logging.getLogger(__name__)

MODES = ("doc", "baseline", "descriptive-only", "compactness-only")


def _validate(scores, truth) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truth).ravel()
    if s.shape != t.shape:
        raise ValueError("scores and truth must have the same length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("truth labels must be 0 or 1")
    if t.sum() == 0 or t.sum() == t.size:
        raise ValueError("need at least one positive and one negative outcome")
    return s, t.astype(np.int64)


def _roc_counts(scores, truth) -> tuple[np.ndarray, np.ndarray, np.ndarray, int, int]:
    s, t = _validate(scores, truth)
    order = np.argsort(s, kind="stable")
    s, t = s[order], t[order]
    # last index of every run of equal scores: ties form one step
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.r_[0, np.cumsum(t)[last]]
    fp = np.r_[0, np.cumsum(1 - t)[last]]
    thresholds = np.r_[-np.inf, s[last]]
    return fp, tp, thresholds, int(t.sum()), int(t.size - t.sum())


def roc(scores, truth) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC of the rule ``score <= delta`` swept over every distinct score.

    Returns ``(fpr, tpr, thresholds)``, starting at (0, 0) for
    ``delta = -inf`` and ending at (1, 1).
    """
    fp, tp, thresholds, n_pos, n_neg = _roc_counts(scores, truth)
    return fp / n_neg, tp / n_pos, thresholds


def auc(scores, truth) -> float:
    """Trapezoidal area under :func:`roc`.

    Accumulated in integer counts, so it equals the pairwise statistic
    (ties count one half) up to a single final division.
    """
    fp, tp, _, n_pos, n_neg = _roc_counts(scores, truth)
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice_area / (2 * n_pos * n_neg)


def eer(scores, truth) -> float:
    """Rate at which false-positive and false-negative rates are equal.

    Linear interpolation between adjacent ROC points when no operating
    point hits equality exactly.
    """
    fpr, tpr, _ = roc(scores, truth)
    gap = fpr - (1.0 - tpr)  # strictly increasing from -1 to 1
    i = int(np.argmax(gap >= 0))
    if gap[i] == 0:
        return float(fpr[i])
    t = -gap[i - 1] / (gap[i] - gap[i - 1])
    return float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1]))


def write_roc_csv(path, scores, truth) -> None:
    fpr, tpr, thr = roc(scores, truth)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for row in zip(thr, fpr, tpr):
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# protocol


@dataclass(frozen=True)
class ProtocolConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    modes: tuple[str, ...] = ("doc",)
    template_count: int = classifier.DEFAULT_TEMPLATE_COUNT
    train_fraction: float = 0.5
    reference_fraction: float = 1.0
    pretrain_epochs: int = 5
    pretrain_lr: float = 0.05
    pretrain_batch: int = 32
    feature_dim: int = 64
    hidden: int = 128
    n_neighbors: int = 1
    repeats: int = 1
    seed: int = 0

    def __post_init__(self):
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise ValueError(f"modes must be drawn from {MODES}, got {self.modes}")
        if self.repeats < 1:
            raise ValueError("repeats must be positive")

    def echo(self) -> dict:
        flat = {k: v for k, v in asdict(self).items() if k != "train"}
        flat.update({f"train.{k}": v for k, v in asdict(self.train).items()})
        return flat


@dataclass
class ClassResult:
    class_name: str
    mode: str
    repeat: int
    auc: float
    eer: float
    n_positive: int
    n_alien: int
    model_hash: str
    scores: np.ndarray = field(repr=False)
    truth: np.ndarray = field(repr=False)
    log: TrainLog | None = field(default=None, repr=False)
    model: Model | None = field(default=None, repr=False)


@dataclass
class ProtocolReport:
    results: list[ClassResult]
    config: dict
    std_axis: str

    def summary(self) -> dict[str, dict[str, float]]:
        """Per mode: mean and population std of AUC and EER.

        Every (class, repeat) run counts as one observation; ``std_axis``
        names what the spread is over.
        """
        out = {}
        for mode in dict.fromkeys(r.mode for r in self.results):
            rows = [r for r in self.results if r.mode == mode]
            a = np.array([r.auc for r in rows])
            e = np.array([r.eer for r in rows])
            out[mode] = {"auc_mean": float(a.mean()), "auc_std": float(a.std()), "eer_mean": float(e.mean()), "eer_std": float(e.std()), "n": len(rows)}
        return out

    def classes(self) -> list[str]:
        return list(dict.fromkeys(r.class_name for r in self.results))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            for key, value in sorted(self.config.items()):
                fh.write(f"# {key}={value}\n")
            fh.write(f"# std_axis={self.std_axis}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "mode", "repeat", "auc", "eer", "n_positive", "n_alien", "model_hash"])
            for r in self.results:
                w.writerow([r.class_name, r.mode, r.repeat, repr(r.auc), repr(r.eer), r.n_positive, r.n_alien, r.model_hash])
            for mode, s in self.summary().items():
                w.writerow(["MEAN", mode, "", repr(s["auc_mean"]), repr(s["eer_mean"]), "", "", ""])
                w.writerow(["STD", mode, "", repr(s["auc_std"]), repr(s["eer_std"]), "", "", ""])

    def table(self) -> str:
        lines = [f"{'class':<14}{'mode':<18}{'rep':>4}{'AUC':>9}{'EER':>9}"]
        for r in self.results:
            lines.append(f"{r.class_name:<14}{r.mode:<18}{r.repeat:>4}{r.auc:>9.4f}{r.eer:>9.4f}")
        for mode, s in self.summary().items():
            lines.append(f"{'mean (std)':<14}{mode:<18}{'':>4}  {s['auc_mean']:.4f} ({s['auc_std']:.4f})  EER {s['eer_mean']:.4f}")
        lines.append(f"std over {self.std_axis}")
        return "\n".join(lines)


def base_model(reference: Dataset, cfg: ProtocolConfig, seed: int) -> tuple[Model, TrainLog]:
    """Build the desk backbone and pretrain it on ``reference`` (the W_0 stand-in)."""
    m = build(desk_backbone(reference.num_classes, cfg.feature_dim, cfg.hidden), reference.image_shape, seed=seed)
    return pretrain_reference(m, reference, cfg.pretrain_epochs, cfg.pretrain_lr, seed, cfg.pretrain_batch, cfg.train.weight_decay)


@dataclass
class ClassTask:
    """Seeded split of one positive class against an equal-size alien sample."""

    class_name: str
    target_train: Dataset
    test_images: np.ndarray
    truth: np.ndarray
    seeds: dict[str, int]


def class_task(dataset: Dataset, class_name: str, cfg: ProtocolConfig, seed: int) -> ClassTask:
    ss = np.random.SeedSequence(seed)
    names = ("split", "alien", "model", "train", "templates")
    seeds = {n: int(s.generate_state(1)[0]) for n, s in zip(names, ss.spawn(len(names)))}
    target = dataset.of_class(class_name)
    target_train, target_test = split(target, cfg.train_fraction, seeds["split"])
    others = [n for n in dataset.class_names if n != class_name]
    if not others:
        raise DatasetError("no alien classes available")
    aliens = dataset.select_classes(others)
    if len(aliens) == 0:
        raise DatasetError("empty alien pool")
    n_alien = min(len(target_test), len(aliens))
    alien_pick = np.sort(np.random.default_rng(seeds["alien"]).choice(len(aliens), size=n_alien, replace=False))
    test_images = np.concatenate([target_test.images, aliens.images[alien_pick]])
    truth = np.r_[np.ones(len(target_test), np.int64), np.zeros(n_alien, np.int64)]
    return ClassTask(class_name, target_train, test_images, truth, seeds)


def score_task(model: Model, task: ClassTask, count: int, n_neighbors: int = 1) -> np.ndarray:
    templates = classifier.generate_templates(model, task.target_train, count, task.seeds["templates"])
    return classifier.score_images(model, task.test_images, templates, n_neighbors)


def run_class(
    dataset: Dataset,
    reference: Dataset,
    class_name: str,
    cfg: ProtocolConfig,
    seed: int,
    repeat: int = 0,
    w0: Model | None = None,
) -> list[ClassResult]:
    """Train and score one positive class for every configured mode."""
    task = class_task(dataset, class_name, cfg, seed)
    ref = filter_overlap(reference, [class_name])
    if w0 is None:
        w0, _ = base_model(ref, cfg, task.seeds["model"])
    # W_0 sees the whole reference set; only DOC training uses the subset
    ref = reference_subset(ref, cfg.reference_fraction, task.seeds["split"])
    results = []
    for mode in cfg.modes:
        log = None
        if mode == "baseline":
            model = w0
        else:
            tcfg = replace(cfg.train, seed=task.seeds["train"])
            if mode == "compactness-only":
                tcfg = replace(tcfg, objective="compactness-only")
            elif mode == "descriptive-only":
                tcfg = replace(tcfg, lam=0.0)
            model, log = train(w0, ref, task.target_train, tcfg)
        scores = score_task(model, task, cfg.template_count, cfg.n_neighbors)
        n_pos = int(task.truth.sum())
        results.append(
            ClassResult(
                class_name, mode, repeat, auc(scores, task.truth), eer(scores, task.truth), n_pos,
                len(task.truth) - n_pos, model.hash(), scores, task.truth, log, model,
            )
        )  # fmt: skip
        logger.info("class %s mode %s repeat %d: AUC %.4f", class_name, mode, repeat, results[-1].auc)
    return results


def run_protocol(
    dataset: Dataset,
    reference: Dataset,
    cfg: ProtocolConfig,
    classes: Sequence[str] | None = None,
) -> ProtocolReport:
    """Treat each listed class of ``dataset`` in turn as the positive class.

    The remaining classes of ``dataset`` form the alien pool; ``reference``
    supplies the descriptiveness loss after removing any class that shares
    a name with the positive class.
    """
    if dataset.num_classes < 2:
        raise DatasetError("protocol needs a dataset with at least 2 classes")
    classes = list(dataset.class_names if classes is None else classes)
    unknown = [c for c in classes if c not in dataset.class_names]
    if unknown:
        raise DatasetError(f"unknown classes {unknown}")
    results = []
    for r in range(cfg.repeats):
        for ci, name in enumerate(classes):
            seed = int(np.random.SeedSequence([cfg.seed, r, ci]).generate_state(1)[0])
            results.extend(run_class(dataset, reference, name, cfg, seed, r))
    axis = "classes" if cfg.repeats == 1 else f"classes x {cfg.repeats} repetitions"
    config = dict(cfg.echo(), dataset=dataset.source, reference=reference.source, classes=",".join(classes))
    return ProtocolReport(results, config, axis)
