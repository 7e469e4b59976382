import numpy as np
import pytest

from doclearn import cli
from doclearn import model as M
from doclearn.classifier import load_templates
from doclearn.trainer import read_log_csv

SMALL = ["--feature-dim", "8", "--hidden", "12"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run("synth", "--classes", 4, "--per-class", 12, "--image-size", 10, "--noise", 0.1, "--out", "data") == 0
    assert run("synth", "--classes", 4, "--per-class", 12, "--image-size", 10, "--select", "hbar,vbar,diag", "--seed", 5, "--out", "ref") == 0
    assert run("pretrain", "--reference", "ref/dataset.bin", "--epochs", 1, "--out", "w0", *SMALL) == 0
    return tmp_path


def train_args(out, *extra):
    return (
        "train", "--checkpoint", "w0/checkpoint.bin", "--target", "data/dataset.bin", "--target-class", "antidiag",
        "--reference", "ref/dataset.bin", "--iterations", 6, "--learning-rate", 0.01, "--batch-size-target", 4,
        "--out", out, *extra,
    )  # fmt: skip


class TestConfig:
    def test_defaults_encode_training_recipe(self):
        cfg = cli.resolve("train", cli.build_parser().parse_args(["train", "--checkpoint", "a", "--target", "b", "--reference", "c"]))
        assert (cfg["lam"], cfg["learning_rate"], cfg["iterations"]) == (0.1, 5e-5, 700)
        assert cli.resolve("templates", cli.build_parser().parse_args(["templates", "--checkpoint", "a", "--target", "b"]))["count"] == 40

    def test_flag_overrides_file(self, tmp_path):
        (tmp_path / "c.txt").write_text("# comment\nlearning_rate = 0.5\niterations=3\n")
        args = cli.build_parser().parse_args(["train", "--config", str(tmp_path / "c.txt"), "--iterations", "9", "--checkpoint", "a", "--target", "b", "--reference", "c"])
        cfg = cli.resolve("train", args)
        assert cfg["learning_rate"] == 0.5 and cfg["iterations"] == 9

    def test_lambda_alias(self):
        args = cli.build_parser().parse_args(["train", "--lambda", "0", "--checkpoint", "a", "--target", "b", "--reference", "c"])
        assert cli.resolve("train", args)["lam"] == 0.0

    def test_unknown_key_in_file(self, tmp_path, capsys):
        (tmp_path / "c.txt").write_text("bogus=1\n")
        assert run("gradcheck", "--config", tmp_path / "c.txt") == cli.EXIT_VALIDATION
        assert "bogus" in capsys.readouterr().err

    def test_missing_field_named(self, capsys):
        assert run("pretrain") == cli.EXIT_VALIDATION
        assert "reference" in capsys.readouterr().err

    def test_bad_number(self, capsys):
        assert run("gradcheck", "--tolerance", "abc") == cli.EXIT_VALIDATION

    def test_missing_file_is_io_error(self, tmp_path, capsys):
        assert run("pretrain", "--reference", tmp_path / "none.bin", "--out", tmp_path / "o") == cli.EXIT_IO
        assert "reference" in capsys.readouterr().err


class TestPipeline:
    def test_pretrain_is_reproducible(self, workdir):
        assert run("pretrain", "--reference", "ref/dataset.bin", "--epochs", 1, "--out", "w0b", *SMALL) == 0
        assert (workdir / "w0/checkpoint.bin").read_bytes() == (workdir / "w0b/checkpoint.bin").read_bytes()
        rows = read_log_csv(workdir / "w0/pretrain_log.csv")
        assert len(rows) == 2  # 36 images in batches of 32
        assert "epochs=1" in (workdir / "w0/config.txt").read_text()

    def test_train_log_and_embedded_config(self, workdir):
        assert run(*train_args("t")) == 0
        rows = read_log_csv(workdir / "t/train_log.csv")
        assert len(rows) == 6
        m = M.load(workdir / "t/checkpoint.bin")
        assert m.metadata["config"]["iterations"] == "6"
        assert m.metadata["iterations"] == 6

    def test_lambda_zero_logs_collapse_diagnostics(self, workdir):
        assert run(*train_args("t0", "--lambda", 0)) == 0
        rows = read_log_csv(workdir / "t0/train_log.csv")
        assert {"feature_norm", "dead_fraction", "l_C"} <= set(rows[0])
        assert all(r["l"] == r["l_D"] for r in rows)

    def test_compactness_only_objective(self, workdir):
        assert run(*train_args("tc", "--objective", "compactness-only")) == 0
        rows = read_log_csv(workdir / "tc/train_log.csv")
        assert all(r["l_D"] == 0.0 for r in rows)

    def test_memeff_matches_two_branch(self, workdir):
        assert run(*train_args("a")) == 0
        assert run(*train_args("b", "--variant", "memeff", "--memeff-weighting", "match-joint")) == 0
        a, b = M.load(workdir / "a/checkpoint.bin").state(), M.load(workdir / "b/checkpoint.bin").state()
        assert max(np.max(np.abs(a[k] - b[k])) for k in a) < 1e-10

    def test_templates_and_score(self, workdir):
        assert run(*train_args("t")) == 0
        assert run("templates", "--checkpoint", "t/checkpoint.bin", "--target", "data/dataset.bin", "--target-class", "antidiag", "--count", 3, "--out", "tm") == 0
        t = load_templates(workdir / "tm/templates.bin")
        assert len(t) == 3
        assert run("score", "--checkpoint", "t/checkpoint.bin", "--templates", "tm/templates.bin", "--images", "data/dataset.bin", "--threshold", 0.0, "--out", "s") == 0
        lines = [ln for ln in (workdir / "s/scores.csv").read_text().splitlines() if not ln.startswith("#")]
        assert lines[0] == "id,label,class,score,decision"
        rows = [ln.split(",") for ln in lines[1:]]
        for sid in t.source_ids:
            row = next(r for r in rows if int(r[0]) == sid)
            assert float(row[3]) == 0.0 and row[4] == "1"

    def test_score_refuses_mismatched_templates(self, workdir, capsys):
        assert run("templates", "--checkpoint", "w0/checkpoint.bin", "--target", "data/dataset.bin", "--count", 3, "--out", "tm") == 0
        assert run(*train_args("t")) == 0
        code = run("score", "--checkpoint", "t/checkpoint.bin", "--templates", "tm/templates.bin", "--images", "data/dataset.bin", "--out", "s")
        assert code == cli.EXIT_VALIDATION
        assert "different model" in capsys.readouterr().err

    def test_corrupt_checkpoint_is_io_error(self, workdir):
        blob = (workdir / "w0/checkpoint.bin").read_bytes()
        (workdir / "bad.bin").write_bytes(blob[:-10])
        assert run("templates", "--checkpoint", "bad.bin", "--target", "data/dataset.bin", "--out", "x") == cli.EXIT_IO

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_numerical_error(self, workdir):
        code = run(*train_args("d", "--learning-rate", 1e12))
        assert code == cli.EXIT_NUMERICAL

    def test_evaluate_writes_report_and_roc(self, workdir, capsys):
        code = run(
            "evaluate", "--dataset", "data/dataset.bin", "--reference", "ref/dataset.bin", "--classes", "antidiag",
            "--modes", "baseline,doc", "--template-count", 3, "--pretrain-epochs", 1, "--iterations", 3,
            "--batch-size-target", 4, "--learning-rate", 0.01, "--out", "ev", *SMALL,
        )  # fmt: skip
        assert code == 0
        report = (workdir / "ev/report.csv").read_text()
        assert "# cli.template_count=3" in report and "# std_axis=classes" in report
        assert (workdir / "ev/roc_antidiag_doc_0.csv").exists()
        assert (workdir / "ev/train_log_antidiag_doc_0.csv").exists()
        assert "antidiag" in capsys.readouterr().out


class TestGradcheck:
    def test_passes_and_lists_every_check(self, tmp_path, capsys):
        assert run("gradcheck", "--quick", "--out", tmp_path / "g") == 0
        out = capsys.readouterr().out
        assert "compactness gradient" in out and "variance" in out and "fc3.weight" in out
        assert "FAIL" not in out
        assert "all checks passed" in (tmp_path / "g/gradcheck.txt").read_text()

    def test_perturbed_gradient_fails(self, capsys):
        assert run("gradcheck", "--quick", "--perturb", 1e-4) == cli.EXIT_NUMERICAL
        assert "FAIL" in capsys.readouterr().out
