"""Tests for the command-line interface.

Commands run in-process through `main(argv)`; exit codes follow the
convention 0 = success, 1 = runtime failure, 2 = usage error.
"""

import numpy as np
import pytest

from macnet.cli import build_standard_plan, main
from macnet.microgen import load_corpus
from macnet.trainer import load_checkpoint


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny corpus plus a trained checkpoint for the downstream commands."""
    path = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--condition", "cogent-a", "--n", "60",
                 "--out", str(path / "corpus"), "--seed", "31"]) == 0
    assert main(["train", "--corpus", str(path / "corpus"),
                 "--out", str(path / "model.ckpt"), "--variant", "smac",
                 "--d", "16", "--p", "2", "--epochs", "1",
                 "--batch-size", "16", "--lr", "1e-3"]) == 0
    return path


class TestUsageErrors:
    """Argument plumbing and exit codes."""

    def test_no_command_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main([])
        assert err.value.code == 2

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["params", "--nope", "1"])
        assert err.value.code == 2

    def test_missing_required_option(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["generate"])  # --out is required
        assert err.value.code == 2
        assert "--out" in capsys.readouterr().err

    def test_runtime_failure_returns_1(self, capsys):
        assert main(["evaluate", "--checkpoint", "/nonexistent.ckpt",
                     "--corpus", "/nonexistent"]) == 1
        assert "error:" in capsys.readouterr().err


class TestParams:
    """Published parameter counts on stdout."""

    def test_smac_counts_and_reductions(self, capsys):
        assert main(["params", "--variant", "smac", "--d", "512"]) == 0
        out = capsys.readouterr().out
        assert "263,168" in out and "262,656" in out
        assert "control 50%" in out and "read 67%" in out and "write 50%" in out

    def test_mac_counts(self, capsys):
        assert main(["params", "--variant", "mac", "--d", "512"]) == 0
        out = capsys.readouterr().out
        assert "525,313" in out and "787,969" in out and "524,800" in out
        assert "reduction" not in out

    def test_bad_variant_fails(self):
        assert main(["params", "--variant", "lstm"]) == 1


class TestGenerate:
    """Corpus generation via the CLI."""

    def test_generated_corpus_loads(self, workspace):
        corpus = load_corpus(workspace / "corpus")
        assert len(corpus) == 60

    def test_echoes_effective_config(self, tmp_path, capsys):
        main(["generate", "--n", "5", "--out", str(tmp_path / "c"), "--seed", "1"])
        out = capsys.readouterr().out
        assert out.startswith("config: ")
        assert "condition=cogent-a" in out and "n=5" in out

    def test_mix_flag(self, tmp_path):
        assert main(["generate", "--n", "10", "--out", str(tmp_path / "m"),
                     "--mix", "exist:1"]) == 0
        corpus = load_corpus(tmp_path / "m")
        assert all(s.category == "exist" for s in corpus.samples)


class TestConfigFile:
    """--config file merging: flags beat file values beat defaults."""

    def test_file_values_used(self, tmp_path, capsys):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("# comment line\nn = 7\ncondition = cogent-b\n")
        assert main(["generate", "--config", str(cfg),
                     "--out", str(tmp_path / "c")]) == 0
        out = capsys.readouterr().out
        assert "n=7" in out and "condition=cogent-b" in out
        assert len(load_corpus(tmp_path / "c")) == 7

    def test_flags_override_file(self, tmp_path, capsys):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text("n=7\n")
        assert main(["generate", "--config", str(cfg), "--n", "9",
                     "--out", str(tmp_path / "c")]) == 0
        assert "n=9" in capsys.readouterr().out

    def test_malformed_config_line_fails(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("this has no equals sign\n")
        assert main(["generate", "--config", str(cfg),
                     "--out", str(tmp_path / "c")]) == 1


class TestTrainEvalFinetune:
    """The training commands chained end to end."""

    def test_checkpoint_was_written(self, workspace):
        ckpt = load_checkpoint(workspace / "model.ckpt")
        assert ckpt.config.variant == "smac" and ckpt.config.d == 16

    def test_evaluate_prints_metrics(self, workspace, capsys):
        assert main(["evaluate", "--checkpoint", str(workspace / "model.ckpt"),
                     "--corpus", str(workspace / "corpus")]) == 0
        out = capsys.readouterr().out
        assert "accuracy=" in out and "n=60" in out

    def test_evaluate_writes_failure_report(self, workspace, tmp_path, capsys):
        report = tmp_path / "failures.txt"
        assert main(["evaluate", "--checkpoint", str(workspace / "model.ckpt"),
                     "--corpus", str(workspace / "corpus"),
                     "--report", str(report),
                     "--train-condition", "cogent-a"]) == 0
        text = report.read_text()
        assert "samples=60" in text and "out-of-condition" in text

    def test_finetune_writes_new_checkpoint(self, workspace, tmp_path, capsys):
        out = tmp_path / "tuned.ckpt"
        assert main(["finetune", "--checkpoint", str(workspace / "model.ckpt"),
                     "--corpus", str(workspace / "corpus"),
                     "--out", str(out), "--epochs", "1", "--lr", "1e-3"]) == 0
        tuned = load_checkpoint(out)
        base = load_checkpoint(workspace / "model.ckpt")
        assert len(tuned.history) == len(base.history) + 1

    def test_viz_writes_heatmaps(self, workspace, tmp_path, capsys):
        corpus = load_corpus(workspace / "corpus")
        qid = corpus.samples[0].question_id
        assert main(["viz", "--checkpoint", str(workspace / "model.ckpt"),
                     "--corpus", str(workspace / "corpus"),
                     "--sample-id", qid, "--out", str(tmp_path)]) == 0
        assert (tmp_path / f"{qid}.attn.txt").exists()
        assert (tmp_path / f"{qid}.step1.pgm").exists()

    def test_viz_unknown_sample_fails(self, workspace, tmp_path):
        assert main(["viz", "--checkpoint", str(workspace / "model.ckpt"),
                     "--corpus", str(workspace / "corpus"),
                     "--sample-id", "no-such-id", "--out", str(tmp_path)]) == 1


class TestGradcheckCommand:
    """Finite-difference verification from the CLI."""

    def test_passes_at_default_tolerance(self, capsys):
        assert main(["gradcheck", "--variant", "smac", "--coords", "40"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_fails_at_impossible_tolerance(self, capsys):
        assert main(["gradcheck", "--variant", "smac", "--coords", "40",
                     "--tolerance", "1e-300"]) == 1
        assert "FAIL" in capsys.readouterr().out


class TestStandardPlan:
    """The matrix plan builder prepares corpora and disjoint shards."""

    def test_plan_structure_and_shards(self, tmp_path):
        plan = build_standard_plan(tmp_path, ["smac"], n_train=40, n_test=20,
                                   ft_ratio=0.25, seed=0)
        labels = [row.label for row in plan.rows]
        assert labels == list("bcdefghij")
        ft = load_corpus(tmp_path / "cogent-b-finetune")
        held = load_corpus(tmp_path / "cogent-b-test")
        ft_ids = {s.question_id for s in ft.samples}
        held_ids = {s.question_id for s in held.samples}
        assert not ft_ids & held_ids
        assert len(ft_ids) == 5 and len(held_ids) == 15
        # pitfall rows (i, j) fine-tune the CLEVR-trained model on the B shard
        by_label = {row.label: row for row in plan.rows}
        assert by_label["i"].train_dir.endswith("clevr-train")
        assert by_label["i"].finetune_dir.endswith("cogent-b-finetune")
        assert by_label["j"].test_dirs[0][0] == "cogent-b-test"

    def test_two_variants_double_the_rows(self, tmp_path):
        plan = build_standard_plan(tmp_path, ["smac", "mac"], n_train=40,
                                   n_test=20, ft_ratio=0.25, seed=0)
        assert len(plan.rows) == 18
        assert {row.variant for row in plan.rows} == {"smac", "mac"}
