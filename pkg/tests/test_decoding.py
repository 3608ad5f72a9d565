import math

import numpy as np
import pytest

from conftest import tiny_config
from sentfuse.data import ParallelCorpus, Vocabulary
from sentfuse.decoding import (
    Hypothesis,
    Translator,
    beam_search,
    bleu,
    greedy_decode,
    throughput_benchmark,
    translate_corpus,
)
from sentfuse.errors import ContractError
from sentfuse.nmt import init_nmt
from sentfuse.training import train_nmt


class TestBleu:
    def test_identical_text_scores_100(self):
        report = bleu(["the cat sat on the mat", "a b"], ["the cat sat on the mat", "a b"])
        assert report.score == pytest.approx(100.0)
        assert report.brevity_penalty == 1.0

    def test_clipping_case_is_zero_with_a_note(self, caplog):
        report = bleu(["the the the the"], ["the cat"])
        assert report.score == 0.0
        assert report.precisions[0] == pytest.approx(0.25)
        assert "smoothing=off" in report.note
        assert "smoothing=off" in report.summary()
        assert "BLEU is 0" in caplog.text

    def test_brevity_penalty_case(self):
        report = bleu(["a b c d"], ["a b c d e"])
        assert report.precisions == pytest.approx([1.0, 1.0, 1.0, 1.0])
        assert report.brevity_penalty == pytest.approx(math.exp(1 - 5 / 4))
        assert report.score == pytest.approx(77.88, abs=0.01)

    def test_add_one_smoothing(self):
        report = bleu(["the the the the"], ["the cat"], smoothing=True)
        assert report.score > 0.0
        assert report.smoothing == "add-one" and report.note == ""

    def test_score_matches_its_components(self):
        hyps = ["the cat sat on the mat", "a dog ran"]
        refs = ["the cat sat on a mat", "a dog ran far"]
        report = bleu(hyps, refs)
        expected = 100 * report.brevity_penalty * math.exp(np.mean(np.log(report.precisions)))
        assert report.score == pytest.approx(expected, rel=1e-6)
        assert (report.hyp_len, report.ref_len) == (9, 10)

    def test_pair_order_does_not_matter(self):
        hyps = ["the cat sat on the mat", "a dog ran", "x y z w"]
        refs = ["the cat sat on a mat", "a dog ran far", "x y z w"]
        assert bleu(hyps, refs).score == pytest.approx(bleu(hyps[::-1], refs[::-1]).score)

    def test_closest_of_several_references(self):
        report = bleu(["a b c d"], [["a b c d e", "a b c d"]])
        assert report.score == pytest.approx(100.0)

    def test_mismatched_counts(self):
        with pytest.raises(ContractError):
            bleu(["a"], ["a", "b"])

    def test_tsv_line(self):
        fields = bleu(["a b c d"], ["a b c d e"]).tsv_line().split("\t")
        assert fields[0] == "77.88"
        assert fields[5] == "0.7788"
        assert fields[6:] == ["4", "5", "smoothing=off"]


class TestHypothesis:
    def test_length_normalized_score(self):
        hyp = Hypothesis([5, 6, 2], -3.0, True)
        assert hyp.score(0.0) == -3.0
        assert hyp.score(1.0) == -1.0
        assert hyp.output_tokens == [5, 6]

    def test_unfinished_keeps_every_token(self):
        hyp = Hypothesis([5, 6], -1.0, False, truncated=True)
        assert hyp.output_tokens == [5, 6] and not hyp.empty
        assert Hypothesis([2], -0.5, True).empty


@pytest.fixture
def baseline_model(config, parallel):
    return init_nmt(config.replace(fusion="off", kt="off"), len(parallel.src_vocab), len(parallel.tgt_vocab))


class TestSearch:
    def test_beam_of_one_is_greedy(self, baseline_model, parallel):
        translator = Translator(baseline_model, max_len=8)
        for src in parallel.source[:5]:
            greedy = translator.greedy(src)
            single = translator.beam_search(src, 1)
            assert single.tokens == greedy.tokens
            assert single.log_prob == pytest.approx(greedy.log_prob, abs=1e-6)

    def test_wider_beam_never_scores_below_greedy(self, baseline_model, parallel):
        translator = Translator(baseline_model, max_len=8)
        for src in parallel.source[:5]:
            greedy = translator.greedy(src)
            wide = translator.beam_search(src, 4)
            assert wide.score(translator.length_penalty) >= greedy.score(translator.length_penalty) - 1e-9

    def test_max_len_bounds_output(self, baseline_model, parallel):
        hyp = greedy_decode(baseline_model, parallel.source[0], max_len=3)
        assert len(hyp.tokens) <= 3
        assert hyp.finished or hyp.truncated
        assert len(beam_search(baseline_model, parallel.source[0], 3, max_len=3).tokens) <= 3

    def test_invalid_beam(self, baseline_model, parallel):
        with pytest.raises(ContractError):
            Translator(baseline_model).beam_search(parallel.source[0], 0)

    def test_bslm_runs_once_per_sentence(self, config, parallel, src_bslm):
        model = init_nmt(config.replace(kt="off"), len(parallel.src_vocab), len(parallel.tgt_vocab))
        translator = Translator(model, src_bslm, max_len=6)
        sources = list(parallel.source[:3])
        translate_corpus(translator, sources, beam=3)
        assert src_bslm.extractions == 3
        translate_corpus(translator, sources, beam=1)
        assert src_bslm.extractions == 6

    def test_worker_pool_keeps_input_order(self, baseline_model, parallel):
        translator = Translator(baseline_model, max_len=6)
        sources = list(parallel.source[:6])
        serial = [h.tokens for h in translate_corpus(translator, sources, beam=2)]
        pooled = [h.tokens for h in translate_corpus(translator, sources, beam=2, workers=3)]
        assert pooled == serial

    @pytest.mark.slow
    def test_memorized_pair_is_decoded(self):
        vocab_src, vocab_tgt = Vocabulary(["a", "b", "c"]), Vocabulary(["A", "B", "C"])
        pair = ParallelCorpus(((4, 5, 6),), ((6, 4, 5),), vocab_src, vocab_tgt)
        config = tiny_config(d_model=16, d_ff=32, fusion="off", kt="off", warmup=50, max_steps=400)
        model = train_nmt(pair, None, None, config).model
        assert Translator(model).beam_search((4, 5, 6), 4).output_tokens == [6, 4, 5]


class TestThroughput:
    def test_report(self, baseline_model, parallel):
        report = throughput_benchmark(Translator(baseline_model, max_len=4), list(parallel.source[:3]), reps=2, beam=2)
        assert report.label == "baseline" and report.sentences == 3 and report.beam == 2
        assert len(report.rep_seconds) == 2
        assert report.median_seconds == pytest.approx(np.median(report.rep_seconds))
        assert report.sentences_per_second == pytest.approx(3 / report.median_seconds)
        assert report.rss_mb > 0
        assert report.tsv_line().split("\t")[:3] == ["baseline", "3", "2"]

    def test_invalid_requests(self, baseline_model, parallel):
        translator = Translator(baseline_model, max_len=4)
        with pytest.raises(ContractError):
            throughput_benchmark(translator, list(parallel.source[:2]), reps=0)
        with pytest.raises(ContractError):
            throughput_benchmark(translator, [])
