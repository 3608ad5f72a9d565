"""Greedy and beam-search decoding, corpus BLEU, and the decoding throughput benchmark."""
from __future__ import annotations

import logging
import statistics
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import psutil
from sacrebleu.metrics import BLEU

from .bslm import BslmCheckpoint, RepresentationCache
from .data import BOS_ID, EOS_ID
from .errors import ContractError
from .nmt import Encoding, NmtModel, decoder_states, encode, source_representations
from .tensor import Tensor, default_dtype, no_grad

logger = logging.getLogger(__name__)

MAX_ORDER = 4


@dataclass
class Hypothesis:
    tokens: List[int]  # generated ids, ending in EOS when finished
    log_prob: float
    finished: bool
    truncated: bool = False

    def score(self, alpha: float) -> float:
        """Length-normalized score log_prob / len^alpha."""
        return self.log_prob / (max(len(self.tokens), 1) ** alpha)

    @property
    def output_tokens(self) -> List[int]:
        return self.tokens[:-1] if self.finished else list(self.tokens)

    @property
    def empty(self) -> bool:
        return not self.output_tokens


class Translator:
    """Decodes with a frozen model; the source BSLM runs once per sentence."""

    def __init__(
        self,
        model: NmtModel,
        src_bslm: Union[BslmCheckpoint, RepresentationCache, None] = None,
        length_penalty: Optional[float] = None,
        max_len: Optional[int] = None,
    ):
        self.model = model
        self.src_bslm = src_bslm
        self.length_penalty = model.config.length_penalty if length_penalty is None else length_penalty
        self.max_len = model.config.max_decode_len if max_len is None else max_len

    def _limit(self, src: Sequence[int], max_len: Optional[int]) -> int:
        limit = max_len or self.max_len or 2 * len(src) + 10
        if limit < 1:
            raise ContractError(f"max_len must be >= 1, got {limit}")
        return limit

    def encode_source(self, src: Sequence[int]) -> Encoding:
        reps = source_representations(self.model, [src], self.src_bslm)
        return encode(self.model, [src], reps)

    def _log_probs(self, encoding: Encoding, prefixes: List[List[int]]) -> np.ndarray:
        count = len(prefixes)
        expanded = Encoding(
            Tensor._wrap(np.repeat(encoding.memory.data, count, axis=0)),
            np.repeat(encoding.lengths, count),
        )
        _, logits = decoder_states(self.model, np.asarray(prefixes, dtype=np.int64), expanded)
        last = logits.data[:, -1, :].astype(np.float64)
        shifted = last - last.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def _greedy(self, encoding: Encoding, limit: int) -> Hypothesis:
        prefix = [BOS_ID]
        total = 0.0
        for _ in range(limit):
            log_probs = self._log_probs(encoding, [prefix])[0]
            token = int(np.argmax(log_probs))
            total = total + log_probs[token]
            prefix.append(token)
            if token == EOS_ID:
                return Hypothesis(prefix[1:], float(total), True)
        return Hypothesis(prefix[1:], float(total), False, truncated=True)

    def _beam(self, encoding: Encoding, beam: int, limit: int, alpha: float) -> Hypothesis:
        alive: List[Tuple[List[int], float]] = [([BOS_ID], 0.0)]
        finished: List[Hypothesis] = []
        for _ in range(limit):
            log_probs = self._log_probs(encoding, [prefix for prefix, _ in alive])
            totals = np.array([score for _, score in alive])[:, None] + log_probs
            flat = totals.ravel()
            vocab = totals.shape[1]
            ranked = np.lexsort((np.arange(flat.size), -flat))[: 2 * beam]
            survivors: List[Tuple[List[int], float]] = []
            for rank, index in enumerate(ranked):
                row, token = divmod(int(index), vocab)
                prefix = alive[row][0] + [token]
                if token == EOS_ID:
                    if rank < beam:
                        finished.append(Hypothesis(prefix[1:], float(flat[index]), True))
                    continue
                survivors.append((prefix, float(flat[index])))
                if len(survivors) == beam:
                    break
            alive = survivors
            if len(finished) >= beam or not alive:
                break
        if finished:
            return max(finished, key=lambda h: h.score(alpha))
        best = max(alive, key=lambda item: item[1] / (len(item[0]) - 1) ** alpha)
        return Hypothesis(best[0][1:], best[1], False, truncated=True)

    def greedy(self, src: Sequence[int], max_len: Optional[int] = None) -> Hypothesis:
        with no_grad(), default_dtype(self.model.dtype):
            return self._greedy(self.encode_source(src), self._limit(src, max_len))

    def beam_search(
        self, src: Sequence[int], beam: int, max_len: Optional[int] = None, alpha: Optional[float] = None
    ) -> Hypothesis:
        """Best finished hypothesis under log_prob / len^alpha.

        With ``beam`` > 1 the greedy path is kept as a fallback, so the result
        never scores below greedy decoding.
        """
        if beam < 1:
            raise ContractError(f"beam must be >= 1, got {beam}")
        alpha = self.length_penalty if alpha is None else alpha
        limit = self._limit(src, max_len)
        with no_grad(), default_dtype(self.model.dtype):
            encoding = self.encode_source(src)
            best = self._beam(encoding, beam, limit, alpha)
            if beam > 1:
                fallback = self._greedy(encoding, limit)
                if fallback.score(alpha) > best.score(alpha):
                    best = fallback
        return best

    def translate(self, src: Sequence[int], beam: int = 1) -> Hypothesis:
        return self.greedy(src) if beam == 1 else self.beam_search(src, beam)


def greedy_decode(model: NmtModel, src: Sequence[int], max_len: Optional[int] = None, src_bslm=None) -> Hypothesis:
    return Translator(model, src_bslm).greedy(src, max_len)


def beam_search(
    model: NmtModel,
    src: Sequence[int],
    beam: int,
    max_len: Optional[int] = None,
    length_penalty: Optional[float] = None,
    src_bslm=None,
) -> Hypothesis:
    return Translator(model, src_bslm, length_penalty).beam_search(src, beam, max_len)


def translate_corpus(
    translator: Translator, sources: Sequence[Sequence[int]], beam: int = 1, workers: int = 1
) -> List[Hypothesis]:
    """Decode every source; results come back in input order."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda src: translator.translate(src, beam), sources))
    else:
        results = [translator.translate(src, beam) for src in sources]
    truncated = sum(h.truncated for h in results)
    empty = sum(h.empty for h in results)
    if truncated:
        logger.warning("%d of %d hypotheses hit max_len without EOS", truncated, len(results))
    if empty:
        logger.warning("%d of %d translations are empty", empty, len(results))
    return results


# --- BLEU ---

def _ngrams(tokens: Sequence[str], max_order: int) -> Counter:
    counts: Counter = Counter()
    for order in range(1, max_order + 1):
        for start in range(len(tokens) - order + 1):
            counts[tuple(tokens[start : start + order])] += 1
    return counts


def sentence_stats(hypothesis: str, references: Sequence[str], max_order: int = MAX_ORDER):
    """Clipped n-gram matches, n-gram totals, hypothesis length and closest reference length."""
    hyp = hypothesis.split()
    refs = [ref.split() for ref in references]
    hyp_counts = _ngrams(hyp, max_order)
    max_ref: Counter = Counter()
    for ref in refs:
        for ngram, count in _ngrams(ref, max_order).items():
            max_ref[ngram] = max(max_ref[ngram], count)
    correct = [0] * max_order
    total = [0] * max_order
    for ngram, count in hyp_counts.items():
        total[len(ngram) - 1] += count
        correct[len(ngram) - 1] += min(count, max_ref[ngram])
    ref_len = min((abs(len(ref) - len(hyp)), len(ref)) for ref in refs)[1]
    return correct, total, len(hyp), ref_len


@dataclass
class BleuReport:
    score: float
    precisions: List[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    correct: List[int] = field(default_factory=list)
    total: List[int] = field(default_factory=list)
    smoothing: str = "off"
    note: str = ""

    def tsv_line(self) -> str:
        fields = [f"{self.score:.2f}", *(f"{p:.4f}" for p in self.precisions), f"{self.brevity_penalty:.4f}",
                  str(self.hyp_len), str(self.ref_len), f"smoothing={self.smoothing}"]
        return "\t".join(fields)

    def summary(self) -> str:
        precisions = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        text = (f"BLEU = {self.score:.2f}, {precisions} (BP = {self.brevity_penalty:.3f}, "
                f"hyp_len = {self.hyp_len}, ref_len = {self.ref_len}, smoothing={self.smoothing})")
        return f"{text} {self.note}".rstrip()


def bleu(
    hypotheses: Sequence[str],
    references: Sequence[Union[str, Sequence[str]]],
    smoothing: bool = False,
    max_order: int = MAX_ORDER,
) -> BleuReport:
    """Corpus BLEU with clipped precisions and brevity penalty min(1, e^(1 - r/h)).

    Each reference item is one string or a sequence of alternative strings.
    Orders with no hypothesis n-grams anywhere in the corpus are left out of
    the geometric mean; an order with n-grams but no match gives 0 unless
    ``smoothing`` (add-one) is on.
    """
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    correct = [0] * max_order
    total = [0] * max_order
    hyp_len = ref_len = 0
    for hypothesis, refs in zip(hypotheses, references):
        refs = [refs] if isinstance(refs, str) else list(refs)
        if not refs:
            raise ContractError("every hypothesis needs at least one reference")
        c, t, h, r = sentence_stats(hypothesis, refs, max_order)
        correct = [a + b for a, b in zip(correct, c)]
        total = [a + b for a, b in zip(total, t)]
        hyp_len += h
        ref_len += r

    method = "add-k" if smoothing else "none"
    result = BLEU.compute_bleu(
        list(correct), list(total), hyp_len, ref_len,
        smooth_method=method, smooth_value=1 if smoothing else None,
        effective_order=True, max_ngram_order=max_order,
    )
    note = ""
    if not smoothing and result.score == 0.0 and any(total):
        note = "(smoothing=off: an n-gram order has no matches)"
        logger.warning("BLEU is 0 without smoothing: an n-gram order has no matches")
    return BleuReport(
        score=float(result.score),
        precisions=[p / 100.0 for p in result.precisions],
        brevity_penalty=float(result.bp),
        hyp_len=hyp_len,
        ref_len=ref_len,
        correct=correct,
        total=total,
        smoothing="add-one" if smoothing else "off",
        note=note,
    )


# --- throughput ---

@dataclass
class ThroughputReport:
    label: str
    sentences: int
    beam: int
    rep_seconds: List[float]
    median_seconds: float
    sentences_per_second: float
    cpu_percent: float
    rss_mb: float

    def tsv_line(self) -> str:
        return (f"{self.label}\t{self.sentences}\t{self.beam}\t{self.median_seconds:.4f}\t"
                f"{self.sentences_per_second:.2f}\t{self.cpu_percent:.1f}\t{self.rss_mb:.1f}")


def throughput_benchmark(
    translator: Translator,
    sources: Sequence[Sequence[int]],
    reps: int = 3,
    beam: int = 4,
    label: str = "",
    workers: int = 1,
) -> ThroughputReport:
    """Median sentences/second over ``reps`` timed passes after one untimed warmup pass."""
    if reps < 1:
        raise ContractError(f"reps must be >= 1, got {reps}")
    if not sources:
        raise ContractError("throughput benchmark needs at least one sentence")
    translate_corpus(translator, sources, beam, workers)
    process = psutil.Process()
    process.cpu_percent(None)
    timings = []
    for _ in range(reps):
        started = time.perf_counter()
        translate_corpus(translator, sources, beam, workers)
        timings.append(time.perf_counter() - started)
    median = statistics.median(timings)
    return ThroughputReport(
        label=label or ("fused" if translator.model.fusion is not None else "baseline"),
        sentences=len(sources),
        beam=beam,
        rep_seconds=timings,
        median_seconds=median,
        sentences_per_second=len(sources) / median,
        cpu_percent=process.cpu_percent(None),
        rss_mb=process.memory_info().rss / 2 ** 20,
    )
