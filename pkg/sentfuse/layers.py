"""Attention, feed-forward, normalization and embedding blocks shared by the SLMs and the NMT model.

All functions accept inputs with or without a leading batch dimension.
Additive masks use :data:`sentfuse.tensor.MASK_SENTINEL` for blocked entries.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import (
    MASK_SENTINEL,
    Tensor,
    as_tensor,
    log_softmax_lastdim,
    matmul,
    normalize_lastdim,
    softmax_lastdim,
)

MASK_KINDS = ("forward", "backward", "none", "cross")


@dataclass(frozen=True)
class AttentionMask:
    kind: str
    matrix: Tensor

    @property
    def shape(self) -> Tuple[int, int]:
        return self.matrix.shape


def build_mask(K: int, kind: str, key_len: Optional[int] = None) -> AttentionMask:
    """Directional mask over K positions.

    ``forward`` blocks keys after the query (queries see positions <= themselves),
    ``backward`` is its transpose, ``none`` and ``cross`` block nothing.
    """
    if K <= 0:
        raise ContractError(f"mask length must be positive, got {K}")
    if kind not in MASK_KINDS:
        raise ContractError(f"unknown mask kind '{kind}' (expected one of {', '.join(MASK_KINDS)})")
    if kind == "cross":
        matrix = np.zeros((K, key_len or K))
    else:
        matrix = np.triu(np.full((K, K), MASK_SENTINEL), k=1)
        if kind == "backward":
            matrix = matrix.T.copy()
        elif kind == "none":
            matrix = np.zeros((K, K))
    return AttentionMask(kind, Tensor(matrix))


def key_padding_mask(lengths: Sequence[int], q_len: int, k_len: int, self_attention: bool = True) -> np.ndarray:
    """Additive [B, 1, q_len, k_len] mask hiding right-padded keys.

    In self-attention a padded query row keeps its own diagonal entry, so no
    row is ever masked everywhere.
    """
    lengths = np.asarray(lengths)
    blocked = np.arange(k_len)[None, None, :] >= lengths[:, None, None]
    blocked = np.broadcast_to(blocked, (len(lengths), q_len, k_len)).copy()
    if self_attention:
        diagonal = np.arange(min(q_len, k_len))
        blocked[:, diagonal, diagonal] = False
    return np.where(blocked, MASK_SENTINEL, 0.0)[:, None, :, :]


def combine_masks(*masks) -> Optional[np.ndarray]:
    arrays = [_mask_array(m) for m in masks if m is not None]
    if not arrays:
        return None
    out = arrays[0]
    for extra in arrays[1:]:
        out = np.minimum(out, extra)
    return out


def _mask_array(mask) -> np.ndarray:
    if isinstance(mask, AttentionMask):
        return mask.matrix.data
    if isinstance(mask, Tensor):
        return mask.data
    return np.asarray(mask)


# --- parameters ---

def group_rng(seed: int, group: str) -> np.random.Generator:
    """Generator dedicated to one parameter group, independent of every other group."""
    digest = hashlib.sha256(group.encode("utf-8")).digest()
    return np.random.default_rng([int(seed), int.from_bytes(digest[:8], "little")])


def uniform_param(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int, name: str) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, name=name)


def constant_param(shape: Tuple[int, ...], value: float, name: str) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, name=name)


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class NormParams:
    scale: Tensor
    offset: Tensor


@dataclass
class LayerParams:
    """One self-attention language model layer."""

    attention: AttentionParams
    ffn: FeedForwardParams
    norm: NormParams

    @property
    def heads(self) -> int:
        return self.attention.heads

    @property
    def width(self) -> int:
        return self.attention.wq.shape[0]


@dataclass
class EncoderLayerParams:
    self_attention: AttentionParams
    norm1: NormParams
    ffn: FeedForwardParams
    norm2: NormParams


@dataclass
class DecoderLayerParams:
    self_attention: AttentionParams
    norm1: NormParams
    cross_attention: AttentionParams
    norm2: NormParams
    ffn: FeedForwardParams
    norm3: NormParams


def init_attention(rng: np.random.Generator, d: int, heads: int, prefix: str) -> AttentionParams:
    if heads <= 0 or d % heads:
        raise ContractError(f"model width {d} is not divisible by {heads} heads")
    return AttentionParams(
        wq=uniform_param(rng, (d, d), d, d, f"{prefix}.wq"),
        wk=uniform_param(rng, (d, d), d, d, f"{prefix}.wk"),
        wv=uniform_param(rng, (d, d), d, d, f"{prefix}.wv"),
        wo=uniform_param(rng, (d, d), d, d, f"{prefix}.wo"),
        heads=heads,
    )


def init_ffn(rng: np.random.Generator, d: int, d_ff: int, prefix: str) -> FeedForwardParams:
    return FeedForwardParams(
        w1=uniform_param(rng, (d, d_ff), d, d_ff, f"{prefix}.w1"),
        b1=constant_param((d_ff,), 0.0, f"{prefix}.b1"),
        w2=uniform_param(rng, (d_ff, d), d_ff, d, f"{prefix}.w2"),
        b2=constant_param((d,), 0.0, f"{prefix}.b2"),
    )


def init_norm(d: int, prefix: str) -> NormParams:
    return NormParams(scale=constant_param((d,), 1.0, f"{prefix}.scale"), offset=constant_param((d,), 0.0, f"{prefix}.offset"))


def init_layer_params(rng: np.random.Generator, d: int, d_ff: int, heads: int, prefix: str) -> LayerParams:
    return LayerParams(
        attention=init_attention(rng, d, heads, f"{prefix}.attention"),
        ffn=init_ffn(rng, d, d_ff, f"{prefix}.ffn"),
        norm=init_norm(d, f"{prefix}.norm"),
    )


def init_encoder_layer(rng: np.random.Generator, d: int, d_ff: int, heads: int, prefix: str) -> EncoderLayerParams:
    return EncoderLayerParams(
        self_attention=init_attention(rng, d, heads, f"{prefix}.self_attention"),
        norm1=init_norm(d, f"{prefix}.norm1"),
        ffn=init_ffn(rng, d, d_ff, f"{prefix}.ffn"),
        norm2=init_norm(d, f"{prefix}.norm2"),
    )


def init_decoder_layer(rng: np.random.Generator, d: int, d_ff: int, heads: int, prefix: str) -> DecoderLayerParams:
    return DecoderLayerParams(
        self_attention=init_attention(rng, d, heads, f"{prefix}.self_attention"),
        norm1=init_norm(d, f"{prefix}.norm1"),
        cross_attention=init_attention(rng, d, heads, f"{prefix}.cross_attention"),
        norm2=init_norm(d, f"{prefix}.norm2"),
        ffn=init_ffn(rng, d, d_ff, f"{prefix}.ffn"),
        norm3=init_norm(d, f"{prefix}.norm3"),
    )


def iter_parameters(obj) -> Iterator[Tensor]:
    """Every tensor reachable from a parameter dataclass, list or dict, in declaration order."""
    if isinstance(obj, Tensor):
        yield obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for field in dataclasses.fields(obj):
            yield from iter_parameters(getattr(obj, field.name))
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from iter_parameters(item)
    elif isinstance(obj, dict):
        for item in obj.values():
            yield from iter_parameters(item)


def named_parameters(obj) -> Dict[str, Tensor]:
    return {tensor.key: tensor for tensor in iter_parameters(obj)}


# --- building blocks ---

def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; a no-op unless a generator is supplied."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor._wrap(keep.astype(x.dtype))


def layer_norm(x: Tensor, norm: NormParams, eps: float = 1e-6) -> Tensor:
    return normalize_lastdim(x, eps) * norm.scale + norm.offset


def feed_forward(x: Tensor, ffn: FeedForwardParams) -> Tensor:
    return matmul((matmul(x, ffn.w1) + ffn.b1).relu(), ffn.w2) + ffn.b2


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    return table[np.asarray(ids, dtype=np.int64)]


def directional_attention(Q: Tensor, K: Tensor, V: Tensor, mask=None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k) + Mask) V."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise DimensionError("attention operands disagree", Q.shape, K.shape, V.shape)
    additive = None
    if mask is not None:
        additive = _mask_array(mask)
        if additive.shape[-2:] != (Q.shape[-2], K.shape[-2]):
            raise DimensionError("attention mask does not match query/key lengths", additive.shape, (Q.shape[-2], K.shape[-2]))
    scores = matmul(Q, K.swapaxes(-1, -2)) / math.sqrt(Q.shape[-1])
    return matmul(softmax_lastdim(scores, additive), V)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    batch, length, width = x.shape
    return x.reshape(batch, length, heads, width // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    batch, heads, length, width = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, length, heads * width)


def multi_head_attention(x_q: Tensor, x_kv: Tensor, params: AttentionParams, mask=None) -> Tensor:
    """H directional attention heads over projected inputs, concatenated and projected."""
    width = params.wq.shape[0]
    if x_q.shape[-1] != width or x_kv.shape[-1] != width:
        raise DimensionError("attention input width differs from its projections", x_q.shape, x_kv.shape, params.wq.shape)
    unbatched = x_q.ndim == 2
    if unbatched:
        x_q, x_kv = x_q.reshape(1, *x_q.shape), x_kv.reshape(1, *x_kv.shape)
    q = _split_heads(matmul(x_q, params.wq), params.heads)
    k = _split_heads(matmul(x_kv, params.wk), params.heads)
    v = _split_heads(matmul(x_kv, params.wv), params.heads)
    if mask is not None:
        mask = _mask_array(mask)
        if mask.ndim == 4 and mask.shape[0] != q.shape[0]:
            raise DimensionError("attention mask batch differs from input batch", mask.shape, q.shape)
    out = matmul(_merge_heads(directional_attention(q, k, v, mask)), params.wo)
    if unbatched:
        out = out.reshape(*out.shape[1:])
    return out


def slm_layer(
    R_prev: Tensor,
    params: LayerParams,
    mask=None,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
    eps: float = 1e-6,
) -> Tensor:
    """LN(FFN(H_m) + R_{m-1}) with H_m the multi-head attention over R_{m-1}."""
    H = multi_head_attention(R_prev, R_prev, params.attention, mask)
    return layer_norm(dropout(feed_forward(H, params.ffn), dropout_rate, rng) + R_prev, params.norm, eps)


def encoder_layer(
    x: Tensor,
    params: EncoderLayerParams,
    mask=None,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
    eps: float = 1e-6,
) -> Tensor:
    attended = multi_head_attention(x, x, params.self_attention, mask)
    h = layer_norm(x + dropout(attended, dropout_rate, rng), params.norm1, eps)
    return layer_norm(h + dropout(feed_forward(h, params.ffn), dropout_rate, rng), params.norm2, eps)


def decoder_layer(
    y: Tensor,
    memory: Tensor,
    params: DecoderLayerParams,
    self_mask=None,
    cross_mask=None,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
    eps: float = 1e-6,
) -> Tensor:
    attended = multi_head_attention(y, y, params.self_attention, self_mask)
    h = layer_norm(y + dropout(attended, dropout_rate, rng), params.norm1, eps)
    crossed = multi_head_attention(h, memory, params.cross_attention, cross_mask)
    h = layer_norm(h + dropout(crossed, dropout_rate, rng), params.norm2, eps)
    return layer_norm(h + dropout(feed_forward(h, params.ffn), dropout_rate, rng), params.norm3, eps)


@lru_cache(maxsize=32)
def _sinusoid_table(K: int, d: int) -> np.ndarray:
    positions = np.arange(K, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.zeros((K, d))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates)
    table.setflags(write=False)
    return table


def positional_encoding(K: int, d: int) -> Tensor:
    """Sinusoidal position table [K, d]; row 0 is [0, 1, 0, 1, ...]."""
    if K < 1 or d < 1:
        raise ContractError(f"positional encoding needs K, d >= 1, got K={K}, d={d}")
    if d % 2:
        raise ContractError(f"positional encoding needs an even width, got {d}")
    return Tensor(_sinusoid_table(K, d))


def positional_rows(positions: np.ndarray, d: int) -> Tensor:
    """Positional encodings gathered for an integer position array of any shape."""
    positions = np.asarray(positions, dtype=np.int64)
    table = positional_encoding(int(positions.max()) + 1, d).data
    return Tensor._wrap(table[positions])


def sequence_cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    lengths: Optional[Sequence[int]] = None,
    smoothing: float = 0.0,
) -> Tensor:
    """Per-sentence mean token cross-entropy, averaged over the batch.

    With ``smoothing`` > 0 each token loss mixes in the mean negative
    log-probability over the vocabulary.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        targets = targets[None, :]
    batch, steps, _ = logits.shape
    if targets.shape != (batch, steps):
        raise DimensionError("targets do not match logits", targets.shape, logits.shape)
    lengths = np.full(batch, steps) if lengths is None else np.asarray(lengths)
    log_probs = log_softmax_lastdim(logits)
    picked = log_probs[np.arange(batch)[:, None], np.arange(steps)[None, :], targets]
    token_loss = -picked
    if smoothing > 0.0:
        token_loss = token_loss * (1.0 - smoothing) + log_probs.mean(axis=-1) * (-smoothing)
    weights = (np.arange(steps)[None, :] < lengths[:, None]) / np.maximum(lengths, 1)[:, None] / batch
    return (token_loss * Tensor._wrap(weights.astype(logits.dtype))).sum()
