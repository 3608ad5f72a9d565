import math
from collections import Counter

import numpy as np
import pytest

from sentfuse import synthetic
from sentfuse.bslm import BACKWARD, FORWARD, BslmCheckpoint, init_slm
from sentfuse.config import TrainConfig
from sentfuse.data import ParallelCorpus, Vocabulary, build_vocabulary
from sentfuse.tensor import default_dtype


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance test, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _no_config_env(monkeypatch):
    monkeypatch.delenv("SENTFUSE_CONFIG", raising=False)


@pytest.fixture
def float64():
    """Run the test body at 64-bit precision."""
    with default_dtype(np.float64):
        yield


TINY = dict(
    d_model=8,
    d_ff=16,
    heads=2,
    bslm_layers=2,
    nmt_layers=2,
    dropout=0.0,
    label_smoothing=0.0,
    warmup=20,
    lm_steps=4,
    max_steps=4,
    token_budget=64,
    validate_every=2,
    log_every=2,
    prefetch=2,
    beam=2,
    seed=3,
)


def tiny_config(**changes) -> TrainConfig:
    return TrainConfig(**{**TINY, **changes}).validate()


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def translation_pairs():
    return synthetic.translation_task(24, seed=5, min_len=2, max_len=5)


@pytest.fixture
def src_vocab(translation_pairs):
    return build_vocabulary(translation_pairs[0])


@pytest.fixture
def tgt_vocab(translation_pairs):
    return build_vocabulary(translation_pairs[1])


@pytest.fixture
def parallel(translation_pairs, src_vocab, tgt_vocab):
    sources, targets = translation_pairs
    return ParallelCorpus(
        tuple(tuple(src_vocab.encode_line(line)) for line in sources),
        tuple(tuple(tgt_vocab.encode_line(line)) for line in targets),
        src_vocab,
        tgt_vocab,
    )


def make_bslm(vocab: Vocabulary, config: TrainConfig, both: bool = True) -> BslmCheckpoint:
    forward = init_slm(FORWARD, len(vocab), config)
    backward = init_slm(BACKWARD, len(vocab), config) if both else None
    return BslmCheckpoint(forward, backward, vocab)


@pytest.fixture
def src_bslm(src_vocab, config):
    return make_bslm(src_vocab, config)


@pytest.fixture
def tgt_bslm(tgt_vocab, config):
    return make_bslm(tgt_vocab, config)


def unigram_perplexity(train, held_out) -> float:
    """Perplexity of an add-one unigram model (EOS-free) fitted on ``train``."""
    counts = Counter(token for sentence in train for token in sentence)
    vocab = set(counts) | {token for sentence in held_out for token in sentence}
    total = sum(counts.values()) + len(vocab)
    nll = [-math.log((counts[token] + 1) / total) for sentence in held_out for token in sentence]
    return math.exp(sum(nll) / len(nll))
