import csv

import pytest

from sentfuse.checkpoint import load_nmt, read_meta
from sentfuse.cli import EXIT_OK, EXIT_USAGE, main
from sentfuse.data import UNK_ID, Vocabulary
from sentfuse.io_utils import read_lines

SMALL = [
    "--set", "d_model=8", "--set", "d_ff=16", "--set", "heads=2", "--set", "bslm_layers=2", "--set", "nmt_layers=2",
    "--set", "dropout=0", "--set", "warmup=10", "--set", "lm_steps=3", "--set", "max_steps=3",
    "--set", "token_budget=64", "--set", "validate_every=2", "--set", "log_every=1", "--set", "beam=2",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    run = lambda *argv: main([str(a) for a in argv])  # noqa: E731
    assert run("synth", "--count", 30, "--mono", 10, "--seed", 4, "--out-dir", root) == EXIT_OK
    for side in ("src", "tgt"):
        assert run("train-lm", "--corpus", root / f"train.{side}", "--output", root / f"{side}.bslm",
                   "--log", root / f"lm.{side}.tsv", *SMALL) == EXIT_OK
    assert run("train-nmt", "--parallel", root / "train.src", root / "train.tgt",
               "--valid", root / "valid.src", root / "valid.tgt",
               "--src-bslm", root / "src.bslm", "--tgt-bslm", root / "tgt.bslm",
               "--output", root / "fused.nmt", "--log", root / "nmt.tsv", *SMALL) == EXIT_OK
    assert run("train-nmt", "--parallel", root / "train.src", root / "train.tgt", "--fusion", "off", "--kt", "off",
               "--output", root / "base.nmt", *SMALL) == EXIT_OK
    return root


def _run(*argv) -> int:
    return main([str(a) for a in argv])


class TestData:
    def test_synth_writes_both_sides(self, workspace):
        assert len(read_lines(workspace / "train.src")) == len(read_lines(workspace / "train.tgt")) == 30
        assert len(read_lines(workspace / "valid.src")) == 3
        assert len(read_lines(workspace / "mono.tgt")) == 10

    def test_grammar_then_bpe_and_vocab(self, tmp_path):
        assert _run("synth", "--task", "grammar", "--count", 40, "--out-dir", tmp_path) == EXIT_OK
        corpus = tmp_path / "grammar.txt"
        assert _run("bpe", "learn", "--input", corpus, "--output", tmp_path / "codes", "--merges", 20) == EXIT_OK
        assert _run("bpe", "apply", "--input", corpus, "--codes", tmp_path / "codes",
                    "--output", tmp_path / "grammar.bpe") == EXIT_OK
        assert len(read_lines(tmp_path / "grammar.bpe")) == 40
        assert _run("vocab", "--input", tmp_path / "grammar.bpe", "--output", tmp_path / "vocab") == EXIT_OK
        vocab = Vocabulary.load(tmp_path / "vocab")
        assert all(UNK_ID not in vocab.encode_line(line) for line in read_lines(tmp_path / "grammar.bpe"))

    def test_apply_needs_codes(self, tmp_path):
        (tmp_path / "in.txt").write_text("a b\n", encoding="utf-8")
        assert _run("bpe", "apply", "--input", tmp_path / "in.txt", "--output", tmp_path / "out") == EXIT_USAGE


class TestTraining:
    def test_logs_and_checkpoints(self, workspace):
        header = (workspace / "lm.src.tsv").read_text(encoding="utf-8").splitlines()[0]
        assert header == "step\tlr\tL_forward\tL_backward\ttokens/sec"
        assert len((workspace / "nmt.tsv").read_text(encoding="utf-8").splitlines()) == 4
        fused = load_nmt(workspace / "fused.nmt")
        assert fused.model.fusion is not None and fused.steps == 3
        meta, config = read_meta(workspace / "fused.nmt")
        assert meta["src_bslm"] == str((workspace / "src.bslm").resolve())
        assert (config.d_model, config.bslm_layers) == (8, 2)
        assert load_nmt(workspace / "base.nmt").model.fusion is None

    def test_fusion_without_bslm_is_a_usage_error(self, workspace, tmp_path):
        assert _run("train-nmt", "--parallel", workspace / "train.src", workspace / "train.tgt",
                    "--output", tmp_path / "x.nmt", *SMALL) == EXIT_USAGE

    def test_unknown_config_key(self, workspace, tmp_path):
        assert _run("train-lm", "--corpus", workspace / "train.src", "--output", tmp_path / "x.bslm",
                    "--set", "d_modle=8") == EXIT_USAGE

    def test_missing_corpus(self, tmp_path):
        assert _run("train-lm", "--corpus", tmp_path / "absent.txt", "--output", tmp_path / "x.bslm") == EXIT_USAGE


class TestTranslate:
    @pytest.mark.parametrize("model", ["fused.nmt", "base.nmt"])
    def test_empty_lines_stay_empty_and_reruns_match(self, workspace, tmp_path, model):
        (tmp_path / "in.txt").write_text("a b c\n\nd e f g\n", encoding="utf-8")
        for name in ("first.txt", "second.txt"):
            assert _run("translate", "--model", workspace / model, "--input", tmp_path / "in.txt",
                        "--output", tmp_path / name, "--beam", 2) == EXIT_OK
        lines = read_lines(tmp_path / "first.txt")
        assert len(lines) == 3 and lines[1] == ""
        assert (tmp_path / "first.txt").read_bytes() == (tmp_path / "second.txt").read_bytes()

    def test_missing_model(self, tmp_path):
        (tmp_path / "in.txt").write_text("a\n", encoding="utf-8")
        assert _run("translate", "--model", tmp_path / "absent.nmt", "--input", tmp_path / "in.txt",
                    "--output", tmp_path / "out.txt") == EXIT_USAGE


class TestScore:
    def test_identical_files(self, workspace, capsys):
        ref = workspace / "valid.tgt"
        assert _run("score", "--hyp", ref, "--ref", ref) == EXIT_OK
        summary, tsv = capsys.readouterr().out.splitlines()
        assert summary.startswith("BLEU = 100.00")
        assert tsv.split("\t")[0] == "100.00"

    def test_mismatched_line_counts(self, workspace):
        assert _run("score", "--hyp", workspace / "valid.tgt", "--ref", workspace / "train.tgt") == EXIT_USAGE


class TestHeatmap:
    def test_rows_are_distributions(self, workspace, tmp_path):
        assert _run("export-heatmap", "--model", workspace / "fused.nmt", "--out", tmp_path / "heat.csv") == EXIT_OK
        with (tmp_path / "heat.csv").open(encoding="utf-8", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["layer", "bslm1", "bslm2"]
        assert [row[0] for row in rows[1:]] == ["encoder1", "encoder2"]
        for row in rows[1:]:
            assert sum(float(v) for v in row[1:]) == pytest.approx(1.0)

    def test_baseline_has_no_weights(self, workspace, tmp_path):
        assert _run("export-heatmap", "--model", workspace / "base.nmt", "--out", tmp_path / "heat.csv") == EXIT_USAGE


class TestBench:
    def test_reports_both_models(self, workspace, tmp_path, capsys):
        (tmp_path / "bench.txt").write_text("a b c\nd e\n", encoding="utf-8")
        assert _run("bench", "--baseline", workspace / "base.nmt", "--fused", workspace / "fused.nmt",
                    "--corpus", tmp_path / "bench.txt", "--beam", 2) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].startswith("config\t")
        assert [line.split("\t")[0] for line in lines[1:]] == ["baseline", "fused", "fused/baseline"]

    def test_too_few_reps(self, workspace, tmp_path):
        (tmp_path / "bench.txt").write_text("a b\n", encoding="utf-8")
        assert _run("bench", "--baseline", workspace / "base.nmt", "--fused", workspace / "fused.nmt",
                    "--corpus", tmp_path / "bench.txt", "--reps", 2) == EXIT_USAGE
