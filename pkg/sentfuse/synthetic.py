"""Seeded synthetic corpora: a token-mapping + reversal translation task and a toy grammar."""
from __future__ import annotations

import string
from typing import List, Tuple

import numpy as np

SOURCE_ALPHABET = tuple(string.ascii_lowercase[:20])
TARGET_ALPHABET = tuple(string.ascii_uppercase[:20])

DETERMINERS = ("the", "a", "every", "no")
ADJECTIVES = ("small", "red", "old", "quiet", "happy")
NOUNS = ("cat", "dog", "bird", "child", "baker", "farmer", "horse")
VERBS = ("sees", "likes", "chases", "finds", "helps")
INTRANSITIVE = ("sleeps", "runs", "sings")


def token_mapping(seed: int) -> dict:
    """A fixed bijection from source symbols to target symbols."""
    order = np.random.default_rng([int(seed), 7]).permutation(len(TARGET_ALPHABET))
    return {src: TARGET_ALPHABET[i] for src, i in zip(SOURCE_ALPHABET, order)}


def translate_symbols(words: List[str], mapping: dict) -> List[str]:
    return [mapping[w] for w in reversed(words)]


def source_sentences(count: int, seed: int, min_len: int = 3, max_len: int = 10) -> List[str]:
    rng = np.random.default_rng([int(seed), 11])
    lines = []
    for _ in range(count):
        length = int(rng.integers(min_len, max_len + 1))
        lines.append(" ".join(SOURCE_ALPHABET[i] for i in rng.integers(0, len(SOURCE_ALPHABET), size=length)))
    return lines


def translation_task(count: int, seed: int, min_len: int = 3, max_len: int = 10) -> Tuple[List[str], List[str]]:
    """Parallel lines where the target maps every source symbol and reverses the order."""
    mapping = token_mapping(seed)
    sources = source_sentences(count, seed, min_len, max_len)
    targets = [" ".join(translate_symbols(line.split(), mapping)) for line in sources]
    return sources, targets


def monolingual_task(count: int, seed: int, side: str = "source") -> List[str]:
    """Monolingual text drawn from the same distribution as one side of the translation task."""
    sources, targets = translation_task(count, seed + 1000)
    if side == "source":
        return sources
    if side == "target":
        return targets
    raise ValueError(f"side must be 'source' or 'target', got {side!r}")


def _noun_phrase(rng: np.random.Generator) -> List[str]:
    words = [DETERMINERS[rng.integers(len(DETERMINERS))]]
    if rng.random() < 0.4:
        words.append(ADJECTIVES[rng.integers(len(ADJECTIVES))])
    words.append(NOUNS[rng.integers(len(NOUNS))])
    return words


def grammar_corpus(count: int, seed: int) -> List[str]:
    """Sentences from S -> NP VP, NP -> DET [ADJ] NOUN, VP -> VERB NP | INTRANSITIVE."""
    rng = np.random.default_rng([int(seed), 13])
    lines = []
    for _ in range(count):
        words = _noun_phrase(rng)
        if rng.random() < 0.7:
            words.append(VERBS[rng.integers(len(VERBS))])
            words.extend(_noun_phrase(rng))
        else:
            words.append(INTRANSITIVE[rng.integers(len(INTRANSITIVE))])
        words.append(".")
        lines.append(" ".join(words))
    return lines
