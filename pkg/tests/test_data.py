import io

import numpy as np
import pytest

from sentfuse import synthetic
from sentfuse.data import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    SPECIAL_TOKENS,
    UNK_ID,
    MergeTable,
    MonoCorpus,
    Vocabulary,
    batch_by_length,
    bpe_apply,
    bpe_learn,
    build_vocabulary,
    detokenize,
    pad_batch,
    read_mono_corpus,
    read_parallel_corpus,
    segment_line,
)
from sentfuse.errors import ContractError, OversizeSentenceError, VocabularyError
from sentfuse.io_utils import open_text_source, read_lines, write_lines


class TestBpe:
    def test_most_frequent_pair_first(self):
        assert bpe_learn(["aaab"], 1).merges == [("a", "a")]

    def test_ties_go_to_smallest_pair(self):
        assert bpe_learn(["ab cd"], 1).merges == [("a", "b</w>")]

    def test_stops_when_no_pairs_remain(self):
        assert len(bpe_learn(["ab"], 10)) == 1

    def test_invalid_requests(self):
        with pytest.raises(ContractError):
            bpe_learn(["abc"], -1)
        with pytest.raises(ContractError):
            bpe_learn(["", "   "], 3)

    def test_apply_marks_continuations(self):
        table = bpe_learn(["aaab"], 1)
        assert bpe_apply("aaab", table) == ["aa@@", "a@@", "b"]

    def test_empty_table_gives_characters(self):
        assert bpe_apply("abc", MergeTable()) == ["a@@", "b@@", "c"]
        assert bpe_apply("x", MergeTable()) == ["x"]

    def test_round_trip_without_unknowns(self):
        lines = synthetic.grammar_corpus(50, seed=2)
        table = bpe_learn(lines, 30)
        segmented = [segment_line(line, table) for line in lines]
        vocab = build_vocabulary(segmented)
        assert all(UNK_ID not in vocab.encode_line(line) for line in segmented)
        assert [detokenize(line) for line in segmented] == [" ".join(line.split()) for line in lines]

    def test_segmentation_is_idempotent(self):
        table = bpe_learn(["lower lowest newer"], 4)
        once = segment_line("lower  newest", table)
        assert segment_line(once, table) == once

    def test_merge_table_file(self, tmp_path):
        table = bpe_learn(["hello hell help"], 5)
        table.save(tmp_path / "codes")
        assert MergeTable.load(tmp_path / "codes").merges == table.merges
        (tmp_path / "bad").write_text("a b c\n", encoding="utf-8")
        with pytest.raises(ContractError):
            MergeTable.load(tmp_path / "bad")

    def test_duplicate_merges_rejected(self):
        with pytest.raises(ContractError):
            MergeTable([("a", "b"), ("a", "b")])

    def test_segment_cache_is_bounded(self):
        table = MergeTable([("a", "b")], cache_size=2)
        words = ["ab", "abab", "cab", "abc", "ba"]
        first = [bpe_apply(word, table) for word in words]
        assert table.segment.cache_info().currsize == 2
        assert [bpe_apply(word, table) for word in words] == first
        assert first[1] == ["ab@@", "ab"]
        with pytest.raises(ContractError):
            MergeTable(cache_size=0)


class TestVocabulary:
    def test_special_ids(self):
        vocab = Vocabulary(["x"])
        assert [vocab.token_to_id[t] for t in SPECIAL_TOKENS] == [PAD_ID, BOS_ID, EOS_ID, UNK_ID] == [0, 1, 2, 3]

    def test_encode_decode(self):
        vocab = Vocabulary(["the", "cat"])
        ids = vocab.encode_line("the dog cat")
        assert ids == [4, UNK_ID, 5]
        assert vocab.decode([BOS_ID, 4, 5, EOS_ID, PAD_ID]) == ["the", "cat"]
        assert vocab.decode_line([4, UNK_ID]) == "the <unk>"

    def test_out_of_range_ids(self):
        with pytest.raises(VocabularyError):
            Vocabulary(["a"]).decode([7])

    def test_frequency_order_and_cap(self):
        vocab = build_vocabulary(["b a b", "c b a"], max_size=6)
        assert vocab.id_to_token[4:] == ["b", "a"]

    def test_file_round_trip(self, tmp_path):
        vocab = build_vocabulary(synthetic.grammar_corpus(20, seed=1))
        vocab.save(tmp_path / "vocab")
        loaded = Vocabulary.load(tmp_path / "vocab")
        assert loaded == vocab
        assert loaded.content_hash == vocab.content_hash

    def test_malformed_file(self, tmp_path):
        (tmp_path / "vocab").write_text("<pad>\t0\n<s>\t2\n", encoding="utf-8")
        with pytest.raises(VocabularyError):
            Vocabulary.load(tmp_path / "vocab")

    def test_hash_depends_on_order(self):
        assert Vocabulary(["a", "b"]).content_hash != Vocabulary(["b", "a"]).content_hash


class TestCorpora:
    def test_empty_lines_are_skipped(self, caplog):
        vocab = Vocabulary(["a", "b", "A", "B"])
        corpus = read_parallel_corpus(io.StringIO("a b\n\nb\n"), io.StringIO("A B\nA\nB\n"), vocab, vocab)
        assert len(corpus) == 2
        assert corpus.offsets == (0, 2)
        assert "Skipping line pair 2" in caplog.text

    def test_mismatched_line_counts(self):
        vocab = Vocabulary(["a"])
        with pytest.raises(ContractError):
            read_parallel_corpus(io.StringIO("a\na\n"), io.StringIO("a\n"), vocab, vocab)

    def test_mono_lengths_count_the_frame(self):
        vocab = Vocabulary(["a", "b"])
        corpus = read_mono_corpus(io.StringIO("a b a\nb\n"), vocab)
        assert corpus.lengths() == [4, 2]

    def test_parallel_subset(self, parallel):
        head = parallel.head(5)
        assert len(head) == 5
        assert head.source == parallel.source[:5]

    def test_empty_sentence_rejected(self):
        with pytest.raises(ContractError):
            MonoCorpus(((4,), ()), Vocabulary(["a"]))


class TestBatching:
    @pytest.fixture
    def lengths(self):
        return np.random.default_rng(3).integers(1, 30, size=200)

    def test_batches_fit_budget_and_cover_everything(self, lengths):
        batches = batch_by_length(lengths, 64, seed=1)
        for batch in batches:
            assert len(batch) * max(lengths[i] for i in batch) <= 64
        assert sorted(i for batch in batches for i in batch) == list(range(200))

    def test_similar_lengths_are_grouped(self, lengths):
        spans = sorted((lengths[list(b)].min(), lengths[list(b)].max()) for b in batch_by_length(lengths, 64))
        for (_, high), (low, _) in zip(spans, spans[1:]):
            assert high <= low

    def test_order_is_seeded(self, lengths):
        assert batch_by_length(lengths, 64, seed=1, epoch=0) == batch_by_length(lengths, 64, seed=1, epoch=0)
        assert batch_by_length(lengths, 64, seed=1, epoch=0) != batch_by_length(lengths, 64, seed=1, epoch=1)

    def test_oversize_sentence(self):
        with pytest.raises(OversizeSentenceError) as info:
            batch_by_length([3, 9, 12], 8)
        assert info.value.index == 1
        assert info.value.length == 9

    def test_corpus_lengths_are_used(self, parallel):
        batches = batch_by_length(parallel, 16)
        lengths = parallel.lengths()
        assert all(len(b) * max(lengths[i] for i in b) <= 16 for b in batches)

    def test_pad_batch(self):
        ids, lengths = pad_batch([[5, 6, 7], [8]])
        np.testing.assert_array_equal(ids, [[5, 6, 7], [8, PAD_ID, PAD_ID]])
        np.testing.assert_array_equal(lengths, [3, 1])


class TestTextIO:
    def test_stream_position_is_restored(self):
        stream = io.StringIO("one\ntwo\n")
        stream.read(2)
        assert read_lines(stream) == ["one", "two"]
        assert stream.tell() == 2

    def test_write_then_read(self, tmp_path):
        write_lines(tmp_path / "sub" / "out.txt", ["a b", "", "c"])
        assert read_lines(tmp_path / "sub" / "out.txt") == ["a b", "", "c"]

    def test_rejects_other_sources(self):
        with pytest.raises(TypeError):
            with open_text_source(42):
                pass
