from dataclasses import replace

import numpy as np
import pytest

from doclearn import model as M
from doclearn.data import Dataset, synth_shapes
from doclearn.losses import compactness, cross_entropy
from doclearn.tensor import flatten
from doclearn.trainer import (
    TrainConfig,
    TrainingDiverged,
    pretrain_reference,
    read_log_csv,
    train,
    train_step,
    train_step_memeff,
    write_log,
)

SIZE = 10


def tiny(seed=0, classes=3):
    return M.build(M.desk_backbone(classes, feature_dim=8, hidden=12), (1, SIZE, SIZE), seed=seed)


def batches(seed=0, classes=3):
    rng = np.random.default_rng(seed)
    ref = (rng.random((6, 1, SIZE, SIZE)), np.arange(6) % classes)
    tgt = rng.random((4, 1, SIZE, SIZE))
    return ref, tgt


def params(m):
    return {k: v.copy() for k, v in m.state().items()}


def max_diff(a, b):
    return max(float(np.max(np.abs(a[k] - b[k]))) for k in a)


def manual_update(m, loss, lr, wd):
    m.zero_grad()
    loss.backward()
    for t in m.trainable_tensors():
        g = np.zeros_like(t.data) if t.grad is None else t.grad
        t.data = t.data - lr * (g + wd * t.data)


CFG = TrainConfig(learning_rate=0.01, weight_decay=5e-4)


class TestTrainStep:
    def test_lambda_zero_is_plain_cross_entropy_step(self):
        ref, tgt = batches()
        a, b = tiny(), tiny()
        train_step(a, ref, tgt, replace(CFG, lam=0.0))
        manual_update(b, cross_entropy(b.logits(ref[0]), ref[1]), CFG.learning_rate, CFG.weight_decay)
        assert max_diff(params(a), params(b)) == 0.0

    def test_matches_manual_composite_step(self):
        ref, tgt = batches(1)
        a, b = tiny(1), tiny(1)
        bundle = train_step(a, ref, tgt, CFG)
        l_d = cross_entropy(b.logits(ref[0]), ref[1])
        l_c = compactness(flatten(b.features(tgt)))
        manual_update(b, l_d + 0.1 * l_c, CFG.learning_rate, CFG.weight_decay)
        assert max_diff(params(a), params(b)) < 1e-15
        assert bundle.total == pytest.approx(bundle.descriptive + 0.1 * bundle.compact, rel=1e-15)

    def test_zero_learning_rate(self):
        ref, tgt = batches()
        m = tiny()
        before = params(m)
        bundle = train_step(m, ref, tgt, replace(CFG, learning_rate=0.0))
        assert max_diff(before, params(m)) == 0.0
        assert bundle.descriptive > 0 and bundle.compact > 0

    def test_small_step_decreases_loss(self):
        ref, tgt = batches(2)
        m = tiny(2)
        cfg = replace(CFG, learning_rate=1e-6, weight_decay=0.0)
        before = train_step(m, ref, tgt, cfg).total
        after = train_step(m, ref, tgt, replace(cfg, learning_rate=0.0)).total
        assert after < before

    def test_frozen_layer_untouched(self):
        ref, tgt = batches()
        m = tiny()
        h = m.frozen_hash()
        for _ in range(3):
            train_step(m, ref, tgt, CFG)
        assert m.frozen_hash() == h

    def test_single_target_sample_rejected(self):
        ref, tgt = batches()
        with pytest.raises(ValueError):
            train_step(tiny(), ref, tgt[:1], CFG)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self):
        ref, tgt = batches()
        m = tiny()
        with pytest.raises(TrainingDiverged):
            for _ in range(50):
                train_step(m, ref, tgt * 1e150, replace(CFG, learning_rate=1e10))

    def test_logit_tap(self):
        ref, tgt = batches()
        a, b = tiny(), tiny()
        train_step(a, ref, tgt, replace(CFG, loss_tap="logits"))
        l_d = cross_entropy(b.logits(ref[0]), ref[1])
        manual_update(b, l_d + 0.1 * compactness(b.logits(tgt)), CFG.learning_rate, CFG.weight_decay)
        assert max_diff(params(a), params(b)) < 1e-15


class TestMemoryEfficient:
    def test_match_joint_equals_two_branch_for_100_steps(self):
        a, b = tiny(4), tiny(4)
        worst = 0.0
        for step in range(100):
            ref, tgt = batches(step)
            train_step(a, ref, tgt, CFG)
            train_step_memeff(b, ref, tgt, CFG)
            worst = max(worst, max_diff(params(a), params(b)))
        assert worst < 1e-10

    @pytest.mark.parametrize("lam,which", [(1.0, "compact"), (0.0, "descriptive")])
    def test_paper_average_degenerate_weights(self, lam, which):
        ref, tgt = batches(5)
        a, b = tiny(5), tiny(5)
        cfg = replace(CFG, lam=lam, variant="memory-efficient", memeff_weighting="paper-average")
        train_step(a, ref, tgt, cfg)
        if which == "compact":
            loss = compactness(flatten(b.features(tgt)))
        else:
            loss = cross_entropy(b.logits(ref[0]), ref[1])
        manual_update(b, loss, CFG.learning_rate, CFG.weight_decay)
        assert max_diff(params(a), params(b)) < 1e-15

    def test_paper_average_differs_from_joint(self):
        ref, tgt = batches(6)
        a, b = tiny(6), tiny(6)
        train_step_memeff(a, ref, tgt, CFG)
        train_step_memeff(b, ref, tgt, replace(CFG, memeff_weighting="paper-average"))
        assert max_diff(params(a), params(b)) > 0


@pytest.fixture(scope="module")
def shapes():
    ds = synth_shapes(4, 12, SIZE, 0.1, seed=0, jitter=0.5)
    return ds.of_class("antidiag"), ds.select_classes(["hbar", "vbar", "diag"])


class TestTrain:
    def test_zero_iterations_identity(self, shapes):
        target, ref = shapes
        m = tiny()
        out, log = train(m, ref, target, replace(CFG, iterations=0))
        assert out.hash() == m.hash() and log.records == []

    def test_deterministic(self, shapes):
        target, ref = shapes
        cfg = replace(CFG, iterations=15, batch_size_target=4, batch_size_reference=5, seed=3)
        a, la = train(tiny(), ref, target, cfg)
        b, lb = train(tiny(), ref, target, cfg)
        assert a.hash() == b.hash()
        assert la.records == lb.records

    def test_input_model_untouched_and_log_shape(self, shapes):
        target, ref = shapes
        m = tiny()
        h = m.hash()
        out, log = train(m, ref, target, replace(CFG, iterations=7, batch_size_target=4))
        assert m.hash() == h and out.hash() != h
        assert [r["iteration"] for r in log.records] == list(range(7))
        assert log.records[2]["epoch"] == pytest.approx(1.0)
        assert out.metadata["iterations"] == 7 and out.metadata["lam"] == 0.1
        assert out.frozen_hash() == m.frozen_hash()

    def test_memeff_variant_reaches_same_hash(self, shapes):
        target, ref = shapes
        cfg = replace(CFG, iterations=10, batch_size_target=4)
        a, _ = train(tiny(), ref, target, cfg)
        b, _ = train(tiny(), ref, target, replace(cfg, variant="memory-efficient"))
        assert max_diff(params(a), params(b)) < 1e-12

    def test_compactness_only_shrinks_features(self, shapes):
        target, _ = shapes
        cfg = replace(CFG, objective="compactness-only", iterations=40, learning_rate=0.05, batch_size_target=12)
        _, log = train(tiny(), None, target, cfg)
        lc = log.column("l_C")
        assert lc[-1] < lc[0]
        assert np.all(log.column("l_D") == 0.0)

    def test_composite_needs_reference(self, shapes):
        target, _ = shapes
        with pytest.raises(ValueError):
            train(tiny(), None, target, replace(CFG, iterations=1))

    def test_reference_class_count_must_match_head(self, shapes):
        target, ref = shapes
        with pytest.raises(ValueError):
            train(tiny(classes=5), ref, target, replace(CFG, iterations=1))

    def test_log_csv_round_trip(self, shapes, tmp_path):
        target, ref = shapes
        _, log = train(tiny(), ref, target, replace(CFG, iterations=3, batch_size_target=4))
        write_log(log, tmp_path / "log.csv", {"lam": 0.1, "seed": 0})
        text = (tmp_path / "log.csv").read_text()
        assert text.startswith("# lam=0.1\n# seed=0\n")
        rows = read_log_csv(tmp_path / "log.csv")
        assert len(rows) == 3 and rows[1]["l"] == log.records[1]["l"]


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"lam": -1}, {"learning_rate": -1}, {"iterations": -1}, {"batch_size_target": 1}, {"variant": "x"}, {"objective": "x"}],
    )
    def test_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lam, cfg.learning_rate, cfg.iterations) == (0.1, 5e-5, 700)


class TestPretrain:
    def test_separable_toy_reaches_95_percent(self):
        rng = np.random.default_rng(0)
        images = np.zeros((40, 1, SIZE, SIZE))
        images[:20, 0, : SIZE // 2] = 1.0
        images[20:, 0, SIZE // 2 :] = 1.0
        images += rng.normal(0, 0.1, images.shape)
        ds = Dataset(images, np.repeat([0, 1], 20), ["top", "bottom"])
        m, log = pretrain_reference(tiny(classes=2), ds, epochs=10, lr=0.05, seed=1, batch_size=8)
        acc = np.mean(M.forward_logits(m, images).argmax(axis=1) == ds.labels)
        assert acc > 0.95
        assert m.trainable == tiny(classes=2).trainable
        assert len(log.records) == 50

    def test_zero_epochs_identity(self, shapes):
        _, ref = shapes
        m = tiny()
        out, _ = pretrain_reference(m, ref, epochs=0)
        assert out.hash() == m.hash()

    def test_deterministic(self, shapes):
        _, ref = shapes
        a, _ = pretrain_reference(tiny(), ref, 2, seed=4)
        b, _ = pretrain_reference(tiny(), ref, 2, seed=4)
        assert a.hash() == b.hash()

    def test_updates_every_layer(self, shapes):
        _, ref = shapes
        m = tiny()
        out, _ = pretrain_reference(m, ref, 1)
        assert out.frozen_hash() != m.frozen_hash()
