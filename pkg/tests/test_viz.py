"""Tests for attention export, heatmaps and failure analysis."""

import numpy as np
import pytest

from macnet.microgen import build_dataset, load_corpus
from macnet.tensor import ContractError
from macnet.trainer import TrainConfig, train
from macnet.viz import (
    AttentionDump,
    DUMP_FORMAT,
    HEATMAP_SCALE,
    failure_report,
    heatmap_bytes,
    parse_dump,
    trace_sample,
    write_dump,
    write_pgm,
)


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    path = tmp_path_factory.mktemp("viz")
    build_dataset("cogent-a", 60, path / "corpus", seed=21)
    corpus = load_corpus(path / "corpus")
    cfg = TrainConfig(variant="smac", d=16, p=2, batch_size=16, lr=1e-3,
                      epochs=1, seed=0)
    ckpt, _ = train(cfg, corpus)
    return ckpt, corpus


class TestHeatmap:
    """Affine 8-bit mapping and upscale."""

    def test_uniform_grid_maps_to_mid_gray(self):
        pixels = heatmap_bytes(np.full((3, 3), 0.25))
        assert pixels.shape == (3 * HEATMAP_SCALE, 3 * HEATMAP_SCALE)
        assert (pixels == 128).all()

    def test_delta_grid_maps_extremes(self):
        grid = np.zeros((2, 2))
        grid[0, 1] = 1.0
        pixels = heatmap_bytes(grid)
        block = pixels[:HEATMAP_SCALE, HEATMAP_SCALE:]
        assert (block == 255).all()
        assert (pixels[:HEATMAP_SCALE, :HEATMAP_SCALE] == 0).all()

    def test_affine_midpoint(self):
        grid = np.array([[0.0, 0.5, 1.0]])
        pixels = heatmap_bytes(grid)
        assert pixels[0, 0] == 0
        assert pixels[0, HEATMAP_SCALE] == 128  # round(255 * 0.5)
        assert pixels[0, 2 * HEATMAP_SCALE] == 255

    def test_upscale_replicates_blocks(self):
        grid = np.array([[0.0, 1.0]])
        pixels = heatmap_bytes(grid)
        for block in (pixels[:, :HEATMAP_SCALE], pixels[:, HEATMAP_SCALE:]):
            assert len(np.unique(block)) == 1

    def test_pgm_header(self, tmp_path):
        path = tmp_path / "x.pgm"
        write_pgm(path, np.zeros((4, 6), dtype=np.uint8))
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n6 4\n255\n")
        assert len(raw) == len(b"P5\n6 4\n255\n") + 24


class TestTraceAndDump:
    """Per-sample traces and the dump file round trip."""

    def test_trace_shapes_and_distributions(self, setup):
        ckpt, corpus = setup
        sample = corpus.samples[0]
        dump = trace_sample(ckpt, corpus, sample)
        p = ckpt.config.p
        assert dump.steps == p
        assert dump.word_attention.shape == (p, len(sample.tokens))
        assert dump.spatial_attention.shape[0] == p
        np.testing.assert_allclose(dump.word_attention.sum(axis=1), np.ones(p),
                                   atol=1e-8)
        np.testing.assert_allclose(dump.spatial_attention.sum(axis=(1, 2)),
                                   np.ones(p), atol=1e-8)
        assert dump.predicted in ckpt.answers
        assert dump.gold == sample.answer

    def test_dump_round_trip(self, setup, tmp_path):
        ckpt, corpus = setup
        dump = trace_sample(ckpt, corpus, corpus.samples[1])
        record = write_dump(dump, tmp_path)
        again = parse_dump(record)
        assert again.sample_id == dump.sample_id
        assert again.tokens == dump.tokens
        assert again.predicted == dump.predicted and again.gold == dump.gold
        np.testing.assert_allclose(again.word_attention, dump.word_attention,
                                   atol=1e-6)
        np.testing.assert_allclose(again.spatial_attention, dump.spatial_attention,
                                   atol=1e-6)

    def test_dump_writes_all_artifacts(self, setup, tmp_path):
        ckpt, corpus = setup
        dump = trace_sample(ckpt, corpus, corpus.samples[2])
        write_dump(dump, tmp_path)
        qid = dump.sample_id
        assert (tmp_path / f"{qid}.attn.txt").exists()
        assert (tmp_path / f"{qid}.words.txt").exists()
        for i in range(1, dump.steps + 1):
            assert (tmp_path / f"{qid}.step{i}.pgm").exists()
        words = (tmp_path / f"{qid}.words.txt").read_text()
        assert f"{dump.tokens[0]}: " in words

    def test_dump_header_versioned(self, setup, tmp_path):
        ckpt, corpus = setup
        dump = trace_sample(ckpt, corpus, corpus.samples[0])
        record = write_dump(dump, tmp_path)
        assert record.read_text().splitlines()[0] == DUMP_FORMAT

    def test_parse_rejects_bad_header(self, tmp_path):
        bad = tmp_path / "bad.attn.txt"
        bad.write_text("something else\n")
        with pytest.raises(ContractError):
            parse_dump(bad)

    def test_byte_identical_dumps(self, setup, tmp_path):
        ckpt, corpus = setup
        dump = trace_sample(ckpt, corpus, corpus.samples[3])
        r1 = write_dump(dump, tmp_path / "one")
        r2 = write_dump(dump, tmp_path / "two")
        assert r1.read_bytes() == r2.read_bytes()


class TestFailureReport:
    """Confusion-cell accounting and the out-of-condition split."""

    def test_accounting_identity(self, setup):
        ckpt, corpus = setup
        report = failure_report(ckpt, corpus)
        n_err = report.total_errors
        assert report.n == len(corpus.samples)
        assert report.accuracy == pytest.approx(1 - n_err / report.n)
        for (cat, gold, pred), count in report.cells.items():
            assert gold != pred and count > 0

    def test_condition_split_partitions_corpus(self, setup):
        ckpt, corpus = setup
        report = failure_report(ckpt, corpus, train_condition="cogent-a")
        assert report.ooc_total + report.in_total == report.n
        assert report.ooc_errors + report.in_errors == report.total_errors
        # an A corpus evaluated against condition A has no forbidden referents
        assert report.ooc_total == 0

    def test_cross_condition_split_nonempty(self, setup, tmp_path):
        ckpt, _ = setup
        build_dataset("cogent-b", 60, tmp_path / "b", seed=22)
        b_corpus = load_corpus(tmp_path / "b")
        report = failure_report(ckpt, b_corpus, train_condition="cogent-a")
        assert report.ooc_total > 0
        assert report.ooc_total + report.in_total == report.n

    def test_format_mentions_all_sections(self, setup):
        ckpt, corpus = setup
        report = failure_report(ckpt, corpus, train_condition="cogent-a")
        text = report.format()
        assert "samples=" in text and "accuracy=" in text
        assert "out-of-condition" in text and "in-condition" in text
