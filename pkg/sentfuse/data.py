"""BPE subwords, vocabularies, corpora and token-budget batching."""
from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, OversizeSentenceError, VocabularyError
from .io_utils import TextSource, read_lines, write_lines

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)

END_OF_WORD = "</w>"
CONTINUATION = "@@"


def normalize_whitespace(line: str) -> str:
    """Collapse runs of whitespace to single spaces and strip the ends."""
    return " ".join(line.split())


# --- BPE ---

@dataclass
class MergeTable:
    merges: List[Tuple[str, str]] = field(default_factory=list)
    cache_size: int = field(default=65536, compare=False)

    def __post_init__(self) -> None:
        if len(set(self.merges)) != len(self.merges):
            raise ContractError("merge table holds duplicate pairs")
        if self.cache_size <= 0:
            raise ContractError(f"cache_size must be positive, got {self.cache_size}")
        self.segment = lru_cache(maxsize=self.cache_size)(self._segment)

    def _segment(self, word: str) -> Tuple[str, ...]:
        symbols = _word_symbols(word)
        for pair in self.merges:
            if len(symbols) == 1:
                break
            symbols = _merge_pair(symbols, pair)
        return symbols

    def __len__(self) -> int:
        return len(self.merges)

    def save(self, path) -> None:
        write_lines(path, (f"{left} {right}" for left, right in self.merges))

    @classmethod
    def load(cls, source: TextSource) -> "MergeTable":
        merges = []
        for number, line in enumerate(read_lines(source), start=1):
            if not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) != 2 or not all(parts):
                raise ContractError(f"merge file line {number} is not two space-separated symbols: {line!r}")
            merges.append((parts[0], parts[1]))
        return cls(merges)


def _word_symbols(word: str) -> Tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + END_OF_WORD,)


def _merge_pair(symbols: Tuple[str, ...], pair: Tuple[str, str]) -> Tuple[str, ...]:
    left, right = pair
    merged: List[str] = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            merged.append(left + right)
            i += 2
        else:
            merged.append(symbols[i])
            i += 1
    return tuple(merged)


def bpe_learn(lines: Iterable[str], num_merges: int) -> MergeTable:
    """Greedy most-frequent-pair merges over the word frequency table.

    Pair counts are recomputed exactly after every merge; ties go to the
    lexicographically smallest pair.
    """
    if num_merges < 0:
        raise ContractError(f"num_merges must be >= 0, got {num_merges}")
    frequencies = Counter(word for line in lines for word in line.split())
    if not frequencies:
        raise ContractError("cannot learn BPE merges from an empty corpus")

    words = {_word_symbols(word): count for word, count in frequencies.items()}
    merges: List[Tuple[str, str]] = []
    while len(merges) < num_merges:
        pairs: Counter = Counter()
        for symbols, count in words.items():
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += count
        if not pairs:
            logger.info("BPE stopped after %d merges: no pairs left", len(merges))
            break
        best = min(pairs.items(), key=lambda item: (-item[1], item[0]))[0]
        merges.append(best)
        words = {_merge_pair(symbols, best): count for symbols, count in words.items()}
    return MergeTable(merges)


def bpe_apply(word: str, table: MergeTable) -> List[str]:
    """Segment one word, marking every non-final subword with ``@@``."""
    if not word:
        return []
    symbols = table.segment(word)
    pieces = [symbol + CONTINUATION for symbol in symbols[:-1]]
    pieces.append(symbols[-1][: -len(END_OF_WORD)])
    return [piece for piece in pieces if piece]


def detokenize(line: str) -> str:
    """Join continuation-marked subwords back into words."""
    line = normalize_whitespace(line)
    line = line.replace(CONTINUATION + " ", "")
    if line.endswith(CONTINUATION):
        line = line[: -len(CONTINUATION)]
    return line


def segment_line(line: str, table: MergeTable) -> str:
    """BPE-segment a line; an already segmented line comes back unchanged."""
    words = detokenize(line).split()
    return " ".join(piece for word in words for piece in bpe_apply(word, table))


# --- vocabulary ---

class Vocabulary:
    """Token <-> id bijection with PAD, BOS, EOS, UNK fixed at ids 0-3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.id_to_token: List[str] = list(SPECIAL_TOKENS)
        for token in tokens:
            if token in SPECIAL_TOKENS:
                continue
            self.id_to_token.append(token)
        self.token_to_id: Dict[str, int] = {token: index for index, token in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise VocabularyError("vocabulary tokens are not unique")
        self.content_hash = hashlib.sha256("\n".join(self.id_to_token).encode("utf-8")).hexdigest()

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and other.content_hash == self.content_hash

    def __hash__(self) -> int:
        return hash(self.content_hash)

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.token_to_id.get(token, UNK_ID) for token in tokens]

    def encode_line(self, line: str) -> List[int]:
        return self.encode(line.split())

    def check_ids(self, ids: Iterable[int]) -> None:
        size = len(self)
        for token_id in ids:
            if not 0 <= int(token_id) < size:
                raise VocabularyError(f"token id {token_id} outside vocabulary of size {size}")

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> List[str]:
        ids = list(ids)
        self.check_ids(ids)
        tokens = []
        for token_id in ids:
            if strip_special and token_id in (PAD_ID, BOS_ID, EOS_ID):
                continue
            tokens.append(self.id_to_token[token_id])
        return tokens

    def decode_line(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))

    def save(self, path) -> None:
        write_lines(path, (f"{token}\t{index}" for index, token in enumerate(self.id_to_token)))

    @classmethod
    def load(cls, source: TextSource) -> "Vocabulary":
        tokens: List[str] = []
        for number, line in enumerate(read_lines(source), start=1):
            if not line:
                continue
            token, sep, index = line.rpartition("\t")
            if not sep or not index.isdigit() or int(index) != len(tokens):
                raise VocabularyError(f"vocabulary line {number} is not 'token<TAB>{len(tokens)}': {line!r}")
            tokens.append(token)
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise VocabularyError(f"vocabulary must start with {', '.join(SPECIAL_TOKENS)}")
        return cls(tokens[len(SPECIAL_TOKENS):])


def build_vocabulary(lines: Iterable[str], max_size: int = 32000) -> Vocabulary:
    """Most frequent tokens first (ties alphabetical), capped at ``max_size`` entries including specials."""
    if max_size <= len(SPECIAL_TOKENS):
        raise ContractError(f"vocabulary size limit must exceed {len(SPECIAL_TOKENS)}, got {max_size}")
    counts = Counter(token for line in lines for token in line.split())
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    kept = [token for token, _ in ranked if token not in SPECIAL_TOKENS][: max_size - len(SPECIAL_TOKENS)]
    if len(kept) < len(counts):
        logger.info("Vocabulary capped at %d of %d distinct tokens", len(kept) + len(SPECIAL_TOKENS), len(counts))
    return Vocabulary(kept)


# --- corpora ---

Sentence = Tuple[int, ...]


@dataclass(frozen=True)
class MonoCorpus:
    sentences: Tuple[Sentence, ...]
    vocab: Vocabulary
    offsets: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        for index, sentence in enumerate(self.sentences):
            if not sentence:
                raise ContractError(f"sentence {index} is empty")
            self.vocab.check_ids(sentence)

    def __len__(self) -> int:
        return len(self.sentences)

    def lengths(self) -> List[int]:
        # +1 for the BOS/EOS frame position
        return [len(sentence) + 1 for sentence in self.sentences]


@dataclass(frozen=True)
class ParallelCorpus:
    source: Tuple[Sentence, ...]
    target: Tuple[Sentence, ...]
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    offsets: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if len(self.source) != len(self.target):
            raise ContractError(f"{len(self.source)} source sentences but {len(self.target)} target sentences")
        for index, (src, tgt) in enumerate(zip(self.source, self.target)):
            if not src or not tgt:
                raise ContractError(f"sentence pair {index} has an empty side")
            self.src_vocab.check_ids(src)
            self.tgt_vocab.check_ids(tgt)

    def __len__(self) -> int:
        return len(self.source)

    def lengths(self) -> List[int]:
        return [max(len(src), len(tgt) + 1) for src, tgt in zip(self.source, self.target)]

    def subset(self, indices: Sequence[int]) -> "ParallelCorpus":
        offsets = tuple(self.offsets[i] for i in indices) if self.offsets else ()
        return ParallelCorpus(
            tuple(self.source[i] for i in indices),
            tuple(self.target[i] for i in indices),
            self.src_vocab,
            self.tgt_vocab,
            offsets,
        )

    def head(self, count: int) -> "ParallelCorpus":
        return self.subset(range(min(count, len(self))))


def read_mono_corpus(source: TextSource, vocab: Vocabulary) -> MonoCorpus:
    sentences, offsets = [], []
    for number, line in enumerate(read_lines(source)):
        if not line.strip():
            logger.warning("Skipping empty line %d", number + 1)
            continue
        sentences.append(tuple(vocab.encode_line(line)))
        offsets.append(number)
    return MonoCorpus(tuple(sentences), vocab, tuple(offsets))


def read_parallel_corpus(
    source: TextSource, target: TextSource, src_vocab: Vocabulary, tgt_vocab: Vocabulary
) -> ParallelCorpus:
    src_lines, tgt_lines = read_lines(source), read_lines(target)
    if len(src_lines) != len(tgt_lines):
        raise ContractError(f"source has {len(src_lines)} lines but target has {len(tgt_lines)}")
    src, tgt, offsets = [], [], []
    for number, (src_line, tgt_line) in enumerate(zip(src_lines, tgt_lines)):
        if not src_line.strip() or not tgt_line.strip():
            logger.warning("Skipping line pair %d with an empty side", number + 1)
            continue
        src.append(tuple(src_vocab.encode_line(src_line)))
        tgt.append(tuple(tgt_vocab.encode_line(tgt_line)))
        offsets.append(number)
    return ParallelCorpus(tuple(src), tuple(tgt), src_vocab, tgt_vocab, tuple(offsets))


# --- batching ---

def batch_by_length(
    corpus: Union[MonoCorpus, ParallelCorpus, Sequence[int]],
    token_budget: int,
    seed: int = 0,
    epoch: int = 0,
) -> List[Tuple[int, ...]]:
    """Group sentence indices of similar length so each padded batch fits ``token_budget``.

    A batch of ``n`` sentences whose longest has ``L`` tokens costs ``n * L``.
    The batch order is shuffled with a generator seeded by ``(seed, epoch)``.
    """
    lengths = np.asarray(corpus.lengths() if hasattr(corpus, "lengths") else corpus, dtype=np.int64)
    if token_budget <= 0:
        raise ContractError(f"token budget must be positive, got {token_budget}")
    oversize = np.flatnonzero(lengths > token_budget)
    if oversize.size:
        index = int(oversize[0])
        raise OversizeSentenceError(index, int(lengths[index]), token_budget)

    batches: List[Tuple[int, ...]] = []
    current: List[int] = []
    longest = 0
    for index in np.argsort(lengths, kind="stable"):
        length = int(lengths[index])
        if current and (len(current) + 1) * max(longest, length) > token_budget:
            batches.append(tuple(current))
            current, longest = [], 0
        current.append(int(index))
        longest = max(longest, length)
    if current:
        batches.append(tuple(current))

    order = np.random.default_rng([int(seed), int(epoch)]).permutation(len(batches))
    return [batches[i] for i in order]


def pad_batch(sentences: Sequence[Sequence[int]], width: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences with PAD; returns ``(ids [B, width], lengths [B])``."""
    lengths = np.array([len(sentence) for sentence in sentences], dtype=np.int64)
    width = int(lengths.max()) if width is None else width
    ids = np.full((len(sentences), width), PAD_ID, dtype=np.int64)
    for row, sentence in enumerate(sentences):
        ids[row, : len(sentence)] = sentence
    return ids, lengths
