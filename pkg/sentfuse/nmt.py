"""Transformer encoder-decoder with BSLM weighted fusion on the encoder and knowledge transfer on the decoder.

Fusion adds ``theta_n * R^W_n`` to the output of encoder layer ``n`` where
``R^W_n = sum_m W[n, m] * R^L_m`` mixes the frozen source BSLM layers and
``theta_n`` is the sigmoid of the mean layer state. Knowledge transfer pulls
decoder layer states toward the frozen target BSLM layers with a squared L2
loss. Both are optional per layer set (off, shallow, deep).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .bslm import BslmCheckpoint, LayerRepresentations, RepresentationCache, extract_batch, normal_param
from .config import TrainConfig, integration_layers
from .data import BOS_ID, EOS_ID, pad_batch
from .errors import ConfigError, DimensionError
from .layers import (
    DecoderLayerParams,
    EncoderLayerParams,
    build_mask,
    combine_masks,
    decoder_layer,
    dropout,
    embed,
    encoder_layer,
    group_rng,
    init_decoder_layer,
    init_encoder_layer,
    key_padding_mask,
    named_parameters,
    positional_rows,
    sequence_cross_entropy,
    uniform_param,
)
from .tensor import Tensor, as_tensor, matmul, stack

logger = logging.getLogger(__name__)


@dataclass
class FusionWeights:
    """Raw N x M layer weights; rows are softmax-normalized only for export."""

    W: Tensor

    @property
    def shape(self):
        return self.W.shape

    def heatmap(self) -> np.ndarray:
        raw = self.W.data.astype(np.float64)
        shifted = np.exp(raw - raw.max(axis=1, keepdims=True))
        return shifted / shifted.sum(axis=1, keepdims=True)


@dataclass
class NmtModel:
    config: TrainConfig
    src_embedding: Tensor
    tgt_embedding: Tensor
    encoder: List[EncoderLayerParams]
    decoder: List[DecoderLayerParams]
    output: Tensor
    fusion: Optional[FusionWeights] = None

    @property
    def width(self) -> int:
        return self.src_embedding.shape[1]

    @property
    def src_vocab_size(self) -> int:
        return self.src_embedding.shape[0]

    @property
    def tgt_vocab_size(self) -> int:
        return self.tgt_embedding.shape[0]

    @property
    def dtype(self):
        return self.src_embedding.dtype

    def parameters(self) -> Dict[str, Tensor]:
        """Trainable parameters; frozen fusion weights are left out."""
        params = named_parameters([self.src_embedding, self.tgt_embedding, self.encoder, self.decoder, self.output])
        if self.fusion is not None and self.fusion.W.requires_grad:
            params[self.fusion.W.key] = self.fusion.W
        return params

    def all_tensors(self) -> Dict[str, Tensor]:
        params = named_parameters([self.src_embedding, self.tgt_embedding, self.encoder, self.decoder, self.output])
        if self.fusion is not None:
            params[self.fusion.W.key] = self.fusion.W
        return params


def init_nmt(
    config: TrainConfig,
    src_vocab_size: int,
    tgt_vocab_size: int,
    seed: Optional[int] = None,
) -> NmtModel:
    """Seeded model; each parameter group has its own generator, so fusion never shifts other values."""
    seed = config.seed if seed is None else seed
    d, d_ff, heads, N = config.d_model, config.ffn_width, config.heads, config.nmt_layers
    src_embedding = normal_param(group_rng(seed, "nmt.src_embedding"), (src_vocab_size, d), d ** -0.5, "nmt.src_embedding")
    tgt_embedding = normal_param(group_rng(seed, "nmt.tgt_embedding"), (tgt_vocab_size, d), d ** -0.5, "nmt.tgt_embedding")
    encoder = [init_encoder_layer(group_rng(seed, f"nmt.encoder{n}"), d, d_ff, heads, f"nmt.encoder{n}") for n in range(N)]
    decoder = [init_decoder_layer(group_rng(seed, f"nmt.decoder{n}"), d, d_ff, heads, f"nmt.decoder{n}") for n in range(N)]
    output = uniform_param(group_rng(seed, "nmt.output"), (d, tgt_vocab_size), d, tgt_vocab_size, "nmt.output")
    fusion = None
    if config.fusion != "off":
        M = config.bslm_layers
        W = Tensor(np.full((N, M), 1.0 / M), requires_grad=not config.freeze_fusion_weights, name="nmt.fusion.W")
        fusion = FusionWeights(W)
    return NmtModel(config, src_embedding, tgt_embedding, encoder, decoder, output, fusion)


# --- fusion ---

def compute_gate(R_S_n: Tensor, lengths: Optional[Sequence[int]] = None) -> Tensor:
    """theta_n = sigmoid(mean over positions of R^S_n), elementwise over d.

    Batched input [B, I, d] averages over each sentence's real positions only.
    """
    R_S_n = as_tensor(R_S_n)
    if R_S_n.shape[-2] < 1:
        raise DimensionError("gate needs at least one position", R_S_n.shape)
    if R_S_n.ndim == 2 or lengths is None:
        return R_S_n.mean(axis=-2).sigmoid()
    lengths = np.asarray(lengths)
    steps = R_S_n.shape[1]
    weights = (np.arange(steps)[None, :] < lengths[:, None]) / lengths[:, None]
    return (R_S_n * Tensor._wrap(weights[:, :, None].astype(R_S_n.dtype))).sum(axis=1).sigmoid()


def task_specific_representation(R_L: Union[LayerRepresentations, Tensor, np.ndarray], W_row: Tensor) -> Tensor:
    """R^W_n = sum_m W[n, m] * R^L_m over the layer axis (-3)."""
    layers = R_L.stack if isinstance(R_L, LayerRepresentations) else as_tensor(R_L)
    W_row = as_tensor(W_row)
    M = layers.shape[-3]
    if W_row.shape != (M,):
        raise DimensionError("fusion weight row does not match the BSLM layer count", W_row.shape, (M,))
    return (layers * W_row.reshape(M, 1, 1)).sum(axis=-3)


def fused_encoder_layer(
    R_S_prev: Tensor,
    R_L,
    model: NmtModel,
    n: int,
    mask=None,
    lengths: Optional[Sequence[int]] = None,
    rng: Optional[np.random.Generator] = None,
    force_gate: Optional[float] = None,
):
    """Vanilla encoder layer ``n`` plus the gated BSLM mixture when fusion covers ``n``.

    Returns ``(output, gate)``; ``gate`` is None when layer ``n`` is not fused.
    """
    config = model.config
    vanilla = encoder_layer(R_S_prev, model.encoder[n], mask, rng, config.dropout if rng is not None else 0.0, config.ln_eps)
    if model.fusion is None or R_L is None or n not in config.fusion_layers():
        return vanilla, None
    layers = R_L.stack if isinstance(R_L, LayerRepresentations) else as_tensor(R_L)
    if layers.shape[-2] != vanilla.shape[-2]:
        raise DimensionError("BSLM representation length differs from the source length", layers.shape, vanilla.shape)
    mixed = task_specific_representation(layers, model.fusion.W[n])
    if force_gate is not None:
        gate = Tensor._wrap(np.full(vanilla.shape[-1:], force_gate, dtype=vanilla.dtype))
    else:
        gate = compute_gate(vanilla, lengths)
    if gate.ndim == 2:
        gate = gate.reshape(gate.shape[0], 1, gate.shape[1])
    return vanilla + gate * mixed, gate


# --- encoder / decoder ---

@dataclass
class Encoding:
    memory: Tensor  # [B, I, d]
    lengths: np.ndarray
    layer_outputs: List[Tensor] = field(default_factory=list)
    gates: List[np.ndarray] = field(default_factory=list)


def _scaled_embedding(table: Tensor, ids: np.ndarray, positions: np.ndarray) -> Tensor:
    d = table.shape[1]
    return embed(table, ids) * math.sqrt(d) + positional_rows(positions, d)


def encode(
    model: NmtModel,
    sources: Sequence[Sequence[int]],
    src_reps: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> Encoding:
    """Run the (fused) encoder over a right-padded source batch.

    ``src_reps`` holds the source BSLM stacks [B, M, I, d] and may be None
    when fusion is off.
    """
    ids, lengths = pad_batch(sources)
    steps = ids.shape[1]
    config = model.config
    rate = config.dropout if rng is not None else 0.0
    x = dropout(_scaled_embedding(model.src_embedding, ids, np.broadcast_to(np.arange(steps), ids.shape)), rate, rng)
    mask = key_padding_mask(lengths, steps, steps)
    R_L = None if src_reps is None else Tensor._wrap(np.asarray(src_reps, dtype=model.dtype))
    if model.fusion is not None and config.fusion_layers() and R_L is None:
        raise ConfigError("fusion is enabled but no source BSLM representations were supplied")
    outputs, gates = [], []
    for n in range(len(model.encoder)):
        x, gate = fused_encoder_layer(x, R_L, model, n, mask, lengths, rng)
        outputs.append(x)
        if gate is not None:
            gates.append(gate.data.copy())
    return Encoding(x, lengths, outputs, gates)


def decoder_states(
    model: NmtModel,
    prefixes: np.ndarray,
    encoding: Encoding,
    prefix_lengths: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
):
    """Teacher-forced decoder over BOS-framed prefixes [B, J]; returns (layer states, logits [B, J, V])."""
    batch, steps = prefixes.shape
    config = model.config
    rate = config.dropout if rng is not None else 0.0
    y = dropout(_scaled_embedding(model.tgt_embedding, prefixes, np.broadcast_to(np.arange(steps), prefixes.shape)), rate, rng)
    prefix_lengths = np.full(batch, steps) if prefix_lengths is None else np.asarray(prefix_lengths)
    self_mask = combine_masks(build_mask(steps, "forward"), key_padding_mask(prefix_lengths, steps, steps))
    memory = encoding.memory
    cross_mask = key_padding_mask(encoding.lengths, steps, memory.shape[1], self_attention=False)
    states = []
    for params in model.decoder:
        y = decoder_layer(y, memory, params, self_mask, cross_mask, rng, rate, config.ln_eps)
        states.append(y)
    return states, matmul(y, model.output)


def decoder_forward(model: NmtModel, y_prefix: Sequence[int], encoding: Encoding):
    """Single-sentence decoder: per-layer states [N, J, d] and logits [J, V]."""
    if encoding.memory.shape[0] != 1:
        raise DimensionError("decoder_forward takes a single-sentence encoding", encoding.memory.shape)
    states, logits = decoder_states(model, np.asarray([y_prefix], dtype=np.int64), encoding)
    return stack([s[0] for s in states]), logits[0]


# --- losses ---

def knowledge_transfer_loss(
    decoder_reps: Tensor,
    bslm_reps: Union[LayerRepresentations, Tensor, np.ndarray],
    layers: Optional[range] = None,
    lengths: Optional[Sequence[int]] = None,
) -> Tensor:
    """L_E = (1/J) sum_n sum_j ||r^T_{n,j} - r^L_{n,j}||^2.

    Unbatched stacks are [N, J, d]; batched stacks are [B, N, J, d] with
    per-sentence lengths, and the per-sentence losses are averaged.
    """
    target = bslm_reps.stack if isinstance(bslm_reps, LayerRepresentations) else as_tensor(bslm_reps)
    if decoder_reps.ndim != target.ndim:
        raise DimensionError("knowledge transfer stacks differ in rank", decoder_reps.shape, target.shape)
    if decoder_reps.shape[-3] != target.shape[-3]:
        raise DimensionError("decoder and BSLM layer counts differ", decoder_reps.shape, target.shape)
    if decoder_reps.shape[-2:] != target.shape[-2:]:
        raise DimensionError("decoder and BSLM lengths differ", decoder_reps.shape, target.shape)
    count = decoder_reps.shape[-3] if layers is None else len(layers)
    diff = decoder_reps[..., :count, :, :] - target[..., :count, :, :]
    squared = (diff * diff).sum(axis=-1)
    steps = decoder_reps.shape[-2]
    if decoder_reps.ndim == 3:
        return squared.sum() / steps
    batch = decoder_reps.shape[0]
    lengths = np.full(batch, steps) if lengths is None else np.asarray(lengths)
    weights = (np.arange(steps)[None, :] < lengths[:, None]) / lengths[:, None] / batch
    return (squared * Tensor._wrap(weights[:, None, :].astype(squared.dtype))).sum()


def translation_loss(logits: Tensor, y_gold, lengths: Optional[Sequence[int]] = None, smoothing: float = 0.0) -> Tensor:
    """L_M: mean token cross-entropy with optional label smoothing."""
    return sequence_cross_entropy(logits, y_gold, lengths, smoothing)


def joint_loss(L_M: Tensor, L_E: Optional[Tensor], kt_scale: float = 1.0) -> Tensor:
    """L_T = L_M + L_E, with ``kt_scale`` weighting L_E (1.0 keeps the plain sum)."""
    if L_E is None:
        return L_M
    if kt_scale == 1.0:
        return L_M + L_E
    return L_M + L_E * kt_scale


@dataclass
class LossBreakdown:
    L_M: Tensor
    L_E: Optional[Tensor]
    L_T: Tensor
    gates: List[np.ndarray]
    target_tokens: int


def source_representations(
    model: NmtModel,
    sources: Sequence[Sequence[int]],
    src_bslm: Union[BslmCheckpoint, RepresentationCache, None],
) -> Optional[np.ndarray]:
    config = model.config
    wanted = bool(config.fusion_layers()) or (config.kt != "off" and config.kt_side == "source")
    if not wanted or src_bslm is None:
        return None
    if isinstance(src_bslm, RepresentationCache):
        return src_bslm.get_batch(sources)
    return extract_batch(src_bslm, sources)


def compute_losses(
    model: NmtModel,
    sources: Sequence[Sequence[int]],
    targets: Sequence[Sequence[int]],
    src_bslm: Union[BslmCheckpoint, RepresentationCache, None] = None,
    tgt_bslm: Optional[BslmCheckpoint] = None,
    rng: Optional[np.random.Generator] = None,
) -> LossBreakdown:
    """Teacher-forced L_M, L_E and L_T for one batch.

    The decoder reads ``BOS y_1..y_T`` and predicts ``y_1..y_T EOS``; L_E
    pairs decoder position ``j - 1`` with the target BSLM stack at ``y_j``.
    """
    config = model.config
    src_reps = source_representations(model, sources, src_bslm)
    encoding = encode(model, sources, src_reps, rng)

    tgt_lengths = np.array([len(t) for t in targets], dtype=np.int64)
    prefixes, _ = pad_batch([[BOS_ID, *t] for t in targets])
    gold, _ = pad_batch([[*t, EOS_ID] for t in targets])
    states, logits = decoder_states(model, prefixes, encoding, tgt_lengths + 1, rng)
    L_M = translation_loss(logits, gold, tgt_lengths + 1, config.label_smoothing)

    L_E = None
    kt_layers = config.kt_layers()
    if kt_layers:
        if config.kt_side == "target":
            if tgt_bslm is None:
                raise ConfigError("knowledge transfer is enabled but no target BSLM was supplied")
            reps = extract_batch(tgt_bslm, targets).astype(model.dtype)
            steps = reps.shape[2]
            decoder_stack = stack([s[:, :steps] for s in states], axis=1)
            L_E = knowledge_transfer_loss(decoder_stack, Tensor._wrap(reps), kt_layers, tgt_lengths)
        else:
            if src_reps is None:
                raise ConfigError("source-side knowledge transfer needs a source BSLM")
            encoder_stack = stack(encoding.layer_outputs, axis=1)
            L_E = knowledge_transfer_loss(encoder_stack, Tensor._wrap(src_reps.astype(model.dtype)), kt_layers, encoding.lengths)
    L_T = joint_loss(L_M, L_E, config.kt_scale)
    return LossBreakdown(L_M, L_E, L_T, encoding.gates, int(tgt_lengths.sum() + len(targets)))
