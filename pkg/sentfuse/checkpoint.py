"""Binary checkpoint container for BSLM and NMT models.

Layout (little-endian): magic ``SFCK``, version, kind, a count-prefixed list
of header ints, then a count-prefixed list of named float32 blocks. A
``.meta`` sidecar holds key=value metadata including the resolved config, and
vocabulary files sit next to the container.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Tuple

import numpy as np
from dotenv import dotenv_values

from .bslm import BACKWARD, FORWARD, BslmCheckpoint, init_slm
from .config import DEFAULT_CONFIG, TrainConfig, config_lines, load_config
from .data import Vocabulary
from .errors import CheckpointError, ConfigError, VocabularyError
from .nmt import NmtModel, init_nmt
from .tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"SFCK"
VERSION = 1
KIND_BSLM, KIND_NMT = 1, 2
DIRECTION_FLAGS = {FORWARD: 1, BACKWARD: 2}


@dataclass
class NmtCheckpoint:
    model: NmtModel
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    steps: int = 0
    losses: Dict[str, float] = field(default_factory=dict)
    best_bleu: float = float("nan")
    final_bleu: float = float("nan")
    src_bslm_path: str = ""
    tgt_bslm_path: str = ""
    src_bslm_hash: str = ""
    tgt_bslm_hash: str = ""

    @property
    def config(self) -> TrainConfig:
        return self.model.config


# --- container ---

def _write_container(path: Path, kind: int, header: List[int], blocks: Dict[str, np.ndarray]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(struct.pack("<4sII", MAGIC, VERSION, kind))
        handle.write(struct.pack("<I", len(header)))
        handle.write(struct.pack(f"<{len(header)}q", *header))
        handle.write(struct.pack("<I", len(blocks)))
        for name, values in blocks.items():
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<H", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<B", values.ndim))
            handle.write(struct.pack(f"<{values.ndim}I", *values.shape))
            handle.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def _read_exact(handle: BinaryIO, size: int) -> bytes:
    data = handle.read(size)
    if len(data) != size:
        raise CheckpointError("checkpoint is truncated")
    return data


def _read_container(path: Path, kind: int) -> Tuple[List[int], Dict[str, np.ndarray]]:
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with path.open("rb") as handle:
        magic, version, found_kind = struct.unpack("<4sII", _read_exact(handle, 12))
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a sentfuse checkpoint")
        if version != VERSION:
            raise CheckpointError(f"{path} has container version {version}, expected {VERSION}")
        if found_kind != kind:
            raise CheckpointError(f"{path} holds a {'BSLM' if found_kind == KIND_BSLM else 'NMT'} model")
        (count,) = struct.unpack("<I", _read_exact(handle, 4))
        header = list(struct.unpack(f"<{count}q", _read_exact(handle, 8 * count)))
        (count,) = struct.unpack("<I", _read_exact(handle, 4))
        blocks: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (length,) = struct.unpack("<H", _read_exact(handle, 2))
            name = _read_exact(handle, length).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(handle, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(handle, 4 * ndim))
            size = int(np.prod(shape, dtype=np.int64))
            blocks[name] = np.frombuffer(_read_exact(handle, 4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if handle.read(1):
            raise CheckpointError(f"{path} has trailing bytes")
    return header, blocks


def _assign(tensors: Dict[str, Tensor], blocks: Dict[str, np.ndarray], path: Path) -> None:
    if set(tensors) != set(blocks):
        missing = sorted(set(tensors) - set(blocks))
        extra = sorted(set(blocks) - set(tensors))
        raise CheckpointError(f"{path} parameter blocks do not match the model (missing {missing}, unexpected {extra})")
    for name, tensor in tensors.items():
        if tensor.shape != blocks[name].shape:
            raise CheckpointError(f"{path} block {name} has shape {blocks[name].shape}, expected {tensor.shape}")
        tensor.data = blocks[name].copy()


# --- sidecar ---

def meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta")


def _write_meta(path: Path, entries: Dict[str, object], config: TrainConfig) -> None:
    lines = [f"{key}={value}" for key, value in entries.items()]
    lines.extend(f"config.{line}" for line in config_lines(config))
    meta_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_meta(path: Path) -> Tuple[Dict[str, str], TrainConfig]:
    target = meta_path(Path(path))
    if not target.is_file():
        raise CheckpointError(f"checkpoint metadata {target} does not exist")
    values = {k: (v or "") for k, v in dotenv_values(target).items()}
    overrides = {k[len("config."):]: v for k, v in values.items() if k.startswith("config.")}
    unknown = sorted(set(overrides) - set(DEFAULT_CONFIG))
    if unknown:
        raise CheckpointError(f"{target} names unknown config keys {unknown}")
    try:
        config = load_config(overrides=overrides, use_env=False)
    except ConfigError as exc:
        raise CheckpointError(f"{target} holds an invalid config: {exc}") from exc
    return {k: v for k, v in values.items() if not k.startswith("config.")}, config


def _float(text: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        return math.nan


def _load_vocab(path: Path) -> Vocabulary:
    if not path.is_file():
        raise CheckpointError(f"vocabulary file {path} does not exist")
    try:
        return Vocabulary.load(path)
    except VocabularyError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


# --- BSLM ---

def bslm_vocab_path(path: Path) -> Path:
    return path.with_name(path.name + ".vocab")


def save_bslm(ckpt: BslmCheckpoint, path, config: TrainConfig) -> None:
    path = Path(path)
    flags = sum(DIRECTION_FLAGS[m.direction] for m in ckpt.models)
    header = [ckpt.num_layers, ckpt.width, ckpt.heads, len(ckpt.vocab), flags]
    blocks: Dict[str, np.ndarray] = {}
    for model in ckpt.models:
        blocks.update({name: tensor.data for name, tensor in model.parameters().items()})
    _write_container(path, KIND_BSLM, header, blocks)
    ckpt.vocab.save(bslm_vocab_path(path))
    _write_meta(
        path,
        {"kind": "bslm", "steps": ckpt.steps, "final_loss": repr(float(ckpt.final_loss)),
         "vocab_hash": ckpt.vocab.content_hash, "directions": ckpt.directions},
        config,
    )
    logger.info("Saved BSLM checkpoint to %s", path)


def load_bslm(path) -> BslmCheckpoint:
    path = Path(path)
    header, blocks = _read_container(path, KIND_BSLM)
    meta, config = read_meta(path)
    if len(header) != 5:
        raise CheckpointError(f"{path} has a malformed BSLM header")
    layers, width, heads, vocab_size, flags = header
    vocab = _load_vocab(bslm_vocab_path(path))
    if meta.get("vocab_hash") != vocab.content_hash or len(vocab) != vocab_size:
        raise CheckpointError(f"vocabulary next to {path} is not the one the BSLM was trained with")
    if (config.bslm_layers, config.d_model, config.heads) != (layers, width, heads):
        raise CheckpointError(f"{path} header disagrees with its recorded config")
    models = {}
    for direction, flag in DIRECTION_FLAGS.items():
        if flags & flag:
            models[direction] = init_slm(direction, vocab_size, config)
    if FORWARD not in models:
        raise CheckpointError(f"{path} holds no forward SLM")
    tensors: Dict[str, Tensor] = {}
    for model in models.values():
        tensors.update(model.parameters())
    _assign(tensors, blocks, path)
    return BslmCheckpoint(
        models[FORWARD], models.get(BACKWARD), vocab,
        steps=int(meta.get("steps", 0) or 0), final_loss=_float(meta.get("final_loss", "nan")),
    )


def bslm_config(path) -> TrainConfig:
    return read_meta(Path(path))[1]


# --- NMT ---

def nmt_vocab_paths(path: Path) -> Tuple[Path, Path]:
    return path.with_name(path.name + ".src.vocab"), path.with_name(path.name + ".tgt.vocab")


def save_nmt(ckpt: NmtCheckpoint, path) -> None:
    path = Path(path)
    model = ckpt.model
    config = model.config
    M = model.fusion.shape[1] if model.fusion is not None else config.bslm_layers
    header = [config.nmt_layers, model.width, config.heads, model.src_vocab_size, model.tgt_vocab_size, M,
              int(model.fusion is not None)]
    _write_container(path, KIND_NMT, header, {name: t.data for name, t in model.all_tensors().items()})
    src_vocab_path, tgt_vocab_path = nmt_vocab_paths(path)
    ckpt.src_vocab.save(src_vocab_path)
    ckpt.tgt_vocab.save(tgt_vocab_path)
    entries: Dict[str, object] = {
        "kind": "nmt",
        "steps": ckpt.steps,
        "best_bleu": repr(float(ckpt.best_bleu)),
        "final_bleu": repr(float(ckpt.final_bleu)),
        "src_vocab_hash": ckpt.src_vocab.content_hash,
        "tgt_vocab_hash": ckpt.tgt_vocab.content_hash,
        "src_bslm": ckpt.src_bslm_path,
        "tgt_bslm": ckpt.tgt_bslm_path,
        "src_bslm_hash": ckpt.src_bslm_hash,
        "tgt_bslm_hash": ckpt.tgt_bslm_hash,
        "fusion": config.fusion,
        "kt": config.kt,
    }
    entries.update({f"loss.{name}": repr(float(value)) for name, value in ckpt.losses.items()})
    _write_meta(path, entries, config)
    logger.info("Saved NMT checkpoint to %s", path)


def load_nmt(path) -> NmtCheckpoint:
    path = Path(path)
    header, blocks = _read_container(path, KIND_NMT)
    meta, config = read_meta(path)
    if len(header) != 7:
        raise CheckpointError(f"{path} has a malformed NMT header")
    layers, width, heads, src_size, tgt_size, bslm_layers, has_fusion = header
    if (config.nmt_layers, config.d_model, config.heads) != (layers, width, heads):
        raise CheckpointError(f"{path} header disagrees with its recorded config")
    if bool(has_fusion) != (config.fusion != "off"):
        raise CheckpointError(f"{path} fusion block disagrees with its recorded config")
    src_vocab_path, tgt_vocab_path = nmt_vocab_paths(path)
    src_vocab, tgt_vocab = _load_vocab(src_vocab_path), _load_vocab(tgt_vocab_path)
    if (len(src_vocab), len(tgt_vocab)) != (src_size, tgt_size):
        raise CheckpointError(f"vocabularies next to {path} do not match the embedding tables")
    if meta.get("src_vocab_hash") != src_vocab.content_hash or meta.get("tgt_vocab_hash") != tgt_vocab.content_hash:
        raise CheckpointError(f"vocabularies next to {path} changed since the model was saved")
    model = init_nmt(config.replace(bslm_layers=bslm_layers), src_size, tgt_size)
    _assign(model.all_tensors(), blocks, path)
    losses = {k[len("loss."):]: _float(v) for k, v in meta.items() if k.startswith("loss.")}
    return NmtCheckpoint(
        model, src_vocab, tgt_vocab,
        steps=int(meta.get("steps", 0) or 0),
        losses=losses,
        best_bleu=_float(meta.get("best_bleu", "nan")),
        final_bleu=_float(meta.get("final_bleu", "nan")),
        src_bslm_path=meta.get("src_bslm", ""),
        tgt_bslm_path=meta.get("tgt_bslm", ""),
        src_bslm_hash=meta.get("src_bslm_hash", ""),
        tgt_bslm_hash=meta.get("tgt_bslm_hash", ""),
    )


def load_referenced_bslm(ckpt: NmtCheckpoint, side: str) -> Optional[BslmCheckpoint]:
    """Load the source or target BSLM an NMT checkpoint was trained with, refusing a changed vocabulary."""
    reference = ckpt.src_bslm_path if side == "source" else ckpt.tgt_bslm_path
    expected = ckpt.src_bslm_hash if side == "source" else ckpt.tgt_bslm_hash
    if not reference:
        return None
    bslm = load_bslm(reference)
    if bslm.vocab.content_hash != expected:
        raise CheckpointError(
            f"{side} BSLM {reference} has vocabulary hash {bslm.vocab.content_hash[:12]}, "
            f"but the NMT model was trained with {expected[:12]}"
        )
    return bslm
