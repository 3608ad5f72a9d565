"""Forward and backward self-attention language models and their frozen layer representations.

A sentence ``w_1..w_K`` is framed as ``BOS w_1..w_K`` for the forward model
and ``w_1..w_K EOS`` for the backward model. After the frame is stripped,
position ``k`` of the forward stack has seen ``BOS, w_1..w_{k-1}`` and of the
backward stack ``w_{k+1}..w_K, EOS``; both predict ``w_k`` from there.

The stack has M layers: the framed embedding plus positional encoding, then
the outputs of M-1 :func:`~sentfuse.layers.slm_layer` blocks. The backward
model counts positions from the sentence end.
"""
from __future__ import annotations

import hashlib
import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import TrainConfig
from .data import BOS_ID, EOS_ID, PAD_ID, Vocabulary
from .errors import ContractError, DimensionError, VocabularyError
from .layers import (
    LayerParams,
    build_mask,
    combine_masks,
    embed,
    group_rng,
    init_layer_params,
    key_padding_mask,
    named_parameters,
    positional_rows,
    sequence_cross_entropy,
    slm_layer,
)
from .tensor import Tensor, matmul, no_grad, stack, stop_gradient

logger = logging.getLogger(__name__)

FORWARD, BACKWARD = "forward", "backward"


@dataclass
class SlmModel:
    direction: str
    embedding: Tensor
    layers: List[LayerParams]
    heads: int

    def __post_init__(self) -> None:
        if self.direction not in (FORWARD, BACKWARD):
            raise ContractError(f"unknown SLM direction {self.direction!r}")

    @property
    def num_layers(self) -> int:
        """M, counting the embedding layer."""
        return len(self.layers) + 1

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def width(self) -> int:
        return self.embedding.shape[1]

    def parameters(self) -> Dict[str, Tensor]:
        return named_parameters([self.embedding, self.layers])


def normal_param(rng: np.random.Generator, shape: Tuple[int, ...], std: float, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def init_slm(direction: str, vocab_size: int, config: TrainConfig, seed: Optional[int] = None) -> SlmModel:
    seed = config.seed if seed is None else seed
    d = config.d_model
    prefix = f"slm.{direction}"
    embedding = normal_param(group_rng(seed, f"{prefix}.embedding"), (vocab_size, d), d ** -0.5, f"{prefix}.embedding")
    layers = [
        init_layer_params(group_rng(seed, f"{prefix}.layer{m}"), d, config.ffn_width, config.heads, f"{prefix}.layer{m}")
        for m in range(2, config.bslm_layers + 1)
    ]
    return SlmModel(direction, embedding, layers, config.heads)


@dataclass(frozen=True)
class LayerRepresentations:
    stack: Tensor  # [M, K, d]
    direction: str  # forward, backward or summed

    @property
    def num_layers(self) -> int:
        return self.stack.shape[0]

    @property
    def length(self) -> int:
        return self.stack.shape[1]

    def __add__(self, other: "LayerRepresentations") -> "LayerRepresentations":
        if self.stack.shape != other.stack.shape:
            raise DimensionError("representation stacks differ in shape", self.stack.shape, other.stack.shape)
        return LayerRepresentations(self.stack + other.stack, "summed")


def _check_sentences(sentences: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    if not sentences:
        raise ContractError("no sentences given")
    lengths = np.array([len(s) for s in sentences], dtype=np.int64)
    if (lengths == 0).any():
        raise ContractError(f"sentence {int(np.flatnonzero(lengths == 0)[0])} is empty")
    for sentence in sentences:
        for token_id in sentence:
            if not 0 <= int(token_id) < vocab_size:
                raise VocabularyError(f"token id {token_id} outside vocabulary of size {vocab_size}")
    return lengths


def slm_stack(
    model: SlmModel,
    sentences: Sequence[Sequence[int]],
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
    eps: float = 1e-6,
) -> Tuple[List[Tensor], np.ndarray]:
    """Framed outputs of all M layers, each [B, K_max + 1, d], and the sentence lengths."""
    lengths = _check_sentences(sentences, model.vocab_size)
    width = int(lengths.max()) + 1
    ids = np.full((len(sentences), width), PAD_ID, dtype=np.int64)
    positions = np.zeros_like(ids)
    for row, sentence in enumerate(sentences):
        k = len(sentence)
        if model.direction == FORWARD:
            ids[row, 0] = BOS_ID
            ids[row, 1 : k + 1] = sentence
            positions[row, : k + 1] = np.arange(k + 1)
        else:
            ids[row, :k] = sentence
            ids[row, k] = EOS_ID
            positions[row, : k + 1] = np.arange(k, -1, -1)

    d = model.width
    x = embed(model.embedding, ids) * math.sqrt(d) + positional_rows(positions, d)
    mask = combine_masks(build_mask(width, model.direction), key_padding_mask(lengths + 1, width, width))
    states = [x]
    for layer in model.layers:
        x = slm_layer(x, layer, mask, rng, dropout_rate, eps)
        states.append(x)
    return states, lengths


def _aligned(model: SlmModel, framed: Tensor, length: int) -> Tensor:
    if model.direction == FORWARD:
        return framed[:, :length]
    return framed[:, 1 : length + 1]


def slm_forward(model: SlmModel, tokens: Sequence[int]) -> LayerRepresentations:
    states, _ = slm_stack(model, [tokens])
    K = len(tokens)
    return LayerRepresentations(stack([_aligned(model, state, K)[0] for state in states]), model.direction)


def lm_loss_batch(
    model: SlmModel,
    sentences: Sequence[Sequence[int]],
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
    smoothing: float = 0.0,
    eps: float = 1e-6,
) -> Tensor:
    """Batch mean of per-sentence mean negative log-likelihood."""
    states, lengths = slm_stack(model, sentences, rng, dropout_rate, eps)
    K = int(lengths.max())
    top = _aligned(model, states[-1], K)
    logits = matmul(top, model.embedding.T) * (model.width ** -0.5)
    targets = np.full((len(sentences), K), PAD_ID, dtype=np.int64)
    for row, sentence in enumerate(sentences):
        targets[row, : len(sentence)] = sentence
    return sequence_cross_entropy(logits, targets, lengths, smoothing)


def lm_loss(model: SlmModel, tokens: Sequence[int]) -> Tensor:
    """(1/K) sum_k -log P(w_k | context) for one sentence."""
    return lm_loss_batch(model, [tokens])


@dataclass
class BslmCheckpoint:
    """A frozen forward SLM, an optional backward SLM, and their shared vocabulary."""

    forward: SlmModel
    backward: Optional[SlmModel]
    vocab: Vocabulary
    steps: int = 0
    final_loss: float = float("nan")
    extractions: int = field(default=0, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.forward.vocab_size != len(self.vocab):
            raise VocabularyError(f"embedding has {self.forward.vocab_size} rows for a vocabulary of {len(self.vocab)}")
        if self.backward is not None:
            ours = (self.forward.num_layers, self.forward.width, self.forward.vocab_size)
            theirs = (self.backward.num_layers, self.backward.width, self.backward.vocab_size)
            if ours != theirs:
                raise ContractError(f"forward and backward SLMs disagree on (M, d, V): {ours} vs {theirs}")

    @property
    def num_layers(self) -> int:
        return self.forward.num_layers

    @property
    def width(self) -> int:
        return self.forward.width

    @property
    def heads(self) -> int:
        return self.forward.heads

    @property
    def models(self) -> List[SlmModel]:
        return [m for m in (self.forward, self.backward) if m is not None]

    @property
    def directions(self) -> str:
        return "both" if self.backward is not None else "forward"

    def fingerprint(self) -> str:
        """Digest of the vocabulary hash and every parameter byte; changes whenever extraction could."""
        digest = hashlib.sha1(self.vocab.content_hash.encode("utf-8"))
        for model in self.models:
            for name, tensor in sorted(model.parameters().items()):
                digest.update(name.encode("utf-8"))
                digest.update(tensor.data.dtype.str.encode("ascii"))
                digest.update(np.ascontiguousarray(tensor.data).tobytes())
        return digest.hexdigest()


def extract_batch(ckpt: BslmCheckpoint, sentences: Sequence[Sequence[int]]) -> np.ndarray:
    """Summed, position-aligned stacks as a constant array [B, M, K_max, d]; padding rows are zero."""
    with no_grad():
        lengths = None
        total = None
        for model in ckpt.models:
            states, lengths = slm_stack(model, sentences)
            K = int(lengths.max())
            part = np.stack([_aligned(model, state, K).data for state in states], axis=1)
            total = part if total is None else total + part
    for row, length in enumerate(lengths):
        total[row, :, length:] = 0.0
    with ckpt._lock:
        ckpt.extractions += len(sentences)
    return total


def extract_representation(
    ckpt: BslmCheckpoint, tokens: Sequence[int], vocab: Optional[Vocabulary] = None
) -> LayerRepresentations:
    """Sum of forward and backward stacks behind a stop-gradient barrier."""
    if vocab is not None and vocab.content_hash != ckpt.vocab.content_hash:
        raise VocabularyError("token ids come from a vocabulary the BSLM was not trained with")
    data = extract_batch(ckpt, [tokens])[0]
    label = "summed" if ckpt.backward is not None else FORWARD
    return LayerRepresentations(stop_gradient(Tensor._wrap(data)), label)


def sentence_key(tokens: Sequence[int]) -> str:
    return hashlib.sha1(np.asarray(tokens, dtype=np.int64).tobytes()).hexdigest()


class RepresentationCache:
    """Memoized extraction keyed by sentence hash, optionally mirrored to ``.npy`` files.

    On disk, entries live under a subdirectory named after the checkpoint
    fingerprint, so a retrained or swapped BSLM never reads another model's stacks.
    """

    def __init__(self, ckpt: BslmCheckpoint, directory: Optional[str] = None):
        self.ckpt = ckpt
        self.directory = Path(directory) / ckpt.fingerprint()[:16] if directory else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._memory: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.misses = 0

    def __len__(self) -> int:
        return len(self._memory)

    def _lookup(self, key: str) -> Optional[np.ndarray]:
        found = self._memory.get(key)
        if found is None and self.directory is not None:
            path = self.directory / f"{key}.npy"
            if path.exists():
                found = np.load(path)
                self._memory[key] = found
        return found

    def get_batch(self, sentences: Sequence[Sequence[int]]) -> np.ndarray:
        """Stacks for a batch, padded to [B, M, K_max, d]."""
        keys = [sentence_key(s) for s in sentences]
        with self._lock:
            missing: Dict[str, Sequence[int]] = {}
            for key, sentence in zip(keys, sentences):
                if key not in missing and self._lookup(key) is None:
                    missing[key] = sentence
            if missing:
                self.misses += len(missing)
                fresh = extract_batch(self.ckpt, list(missing.values()))
                for row, (key, sentence) in enumerate(missing.items()):
                    entry = np.ascontiguousarray(fresh[row, :, : len(sentence)])
                    self._memory[key] = entry
                    if self.directory is not None:
                        np.save(self.directory / f"{key}.npy", entry)
            entries = [self._memory[key] for key in keys]
        width = max(entry.shape[1] for entry in entries)
        out = np.zeros((len(entries), entries[0].shape[0], width, entries[0].shape[2]), dtype=entries[0].dtype)
        for row, entry in enumerate(entries):
            out[row, :, : entry.shape[1]] = entry
        return out

    def get(self, tokens: Sequence[int]) -> LayerRepresentations:
        data = self.get_batch([tokens])[0]
        return LayerRepresentations(Tensor._wrap(data), "summed" if self.ckpt.backward is not None else FORWARD)
