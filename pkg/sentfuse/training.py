"""Adam with warmup, the SLM pretraining loop and the joint NMT training loop."""
from __future__ import annotations

import itertools
import logging
import math
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .bslm import BACKWARD, FORWARD, BslmCheckpoint, RepresentationCache, init_slm, lm_loss_batch
from .checkpoint import NmtCheckpoint
from .config import TrainConfig
from .data import MonoCorpus, ParallelCorpus, batch_by_length, detokenize
from .decoding import Translator, bleu, translate_corpus
from .errors import ConfigError, ContractError, NonFiniteGradientError, TrainingDivergenceError, VocabularyError
from .layers import group_rng
from .nmt import NmtModel, compute_losses, init_nmt
from .tensor import GradTable, Tensor, backward

logger = logging.getLogger(__name__)


def lr_schedule(step: int, d: int, warmup: int, scale: float = 1.0) -> float:
    """scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ContractError(f"learning-rate step must be >= 1, got {step}")
    return scale * d ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: TrainConfig) -> "OptimizerState":
        return cls(config.adam_beta1, config.adam_beta2, config.adam_eps)


def adam_step(params: Dict[str, Tensor], grads: GradTable, state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update, in place. Nothing changes if any gradient is non-finite."""
    for name, grad in grads.items():
        if name in params and not np.isfinite(grad.data).all():
            raise NonFiniteGradientError(name)
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        g = grad.data
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data = (param.data - update).astype(param.data.dtype)


def clip_grad_norm(grads: GradTable, max_norm: float) -> float:
    """Scale every gradient so the global norm is at most ``max_norm``; returns the norm before clipping."""
    norm = grads.global_norm()
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for grad in grads.values():
            grad.data = (grad.data * factor).astype(grad.data.dtype)
    return norm


def create_loss_monitor(window: int = 100, divergence_window: int = 500, factor: float = 2.0) -> Callable[[float], float]:
    """
    Creates a loss monitor that keeps a moving average over the last ``window`` losses.
    """
    recent = deque(maxlen=window)
    initial: List[float] = []
    streak = [0]

    def monitor(loss: float) -> float:
        """
        Records one loss and returns the moving average; raises when the loss
        has stayed above ``factor`` times the first loss for ``divergence_window`` steps.
        """
        if not initial:
            initial.append(loss)
        recent.append(loss)
        streak[0] = streak[0] + 1 if loss > factor * initial[0] else 0
        if streak[0] >= divergence_window:
            raise TrainingDivergenceError(
                f"loss stayed above {factor:g}x its initial value {initial[0]:.4f} for {streak[0]} steps"
            )
        return float(sum(recent) / len(recent))

    return monitor


class TrainingLog:
    """Append-only tab-separated step records."""

    def __init__(self, path: Optional[Path], columns: Sequence[str]):
        self.path = Path(path) if path else None
        self.columns = list(columns)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists() or self.path.stat().st_size == 0:
                self.path.write_text("\t".join(self.columns) + "\n", encoding="utf-8")

    def append(self, *values) -> None:
        if self.path is None:
            return
        if len(values) != len(self.columns):
            raise ContractError(f"log record has {len(values)} values for {len(self.columns)} columns")
        text = "\t".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in values)
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(text + "\n")


_DONE = object()


class _Failure:
    def __init__(self, exc: BaseException):
        self.exc = exc


class BatchPrefetcher:
    """Builds batches on a worker thread and hands them over through a bounded queue.

    Batches come out in production order, epoch after epoch, so timing never
    changes what the training loop sees.
    """

    def __init__(
        self,
        plan: Callable[[int], List[Tuple[int, ...]]],
        build: Callable[[Tuple[int, ...]], object],
        size: int = 4,
        stop_event: Optional[threading.Event] = None,
    ):
        self._plan = plan
        self._build = build
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(1, size))
        self._stop = threading.Event()
        self._external_stop = stop_event
        self._thread = threading.Thread(target=self._run, name="batch-prefetch", daemon=True)

    def _stopped(self) -> bool:
        return self._stop.is_set() or (self._external_stop is not None and self._external_stop.is_set())

    def _put(self, item) -> bool:
        while not self._stopped():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self) -> None:
        try:
            for epoch in itertools.count():
                batches = self._plan(epoch)
                if not batches:
                    break
                for indices in batches:
                    if not self._put(self._build(indices)):
                        return
        except BaseException as exc:
            self._put(_Failure(exc))
            return
        self._put(_DONE)

    def __enter__(self) -> "BatchPrefetcher":
        self._thread.start()
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def __iter__(self) -> Iterator[object]:
        return self

    def __next__(self):
        while True:
            try:
                item = self._queue.get(timeout=0.1)
                break
            except queue.Empty:
                if not self._thread.is_alive() and self._queue.empty():
                    raise StopIteration
        if item is _DONE:
            raise StopIteration
        if isinstance(item, _Failure):
            raise item.exc
        return item

    def close(self, timeout: float = 5.0) -> None:
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join(timeout=timeout)


# --- SLM pretraining ---

def train_slm(
    corpus: MonoCorpus,
    config: TrainConfig,
    log_path: Optional[Path] = None,
    stop_event: Optional[threading.Event] = None,
) -> BslmCheckpoint:
    """Train the forward (and backward) SLM independently on the same batches."""
    if len(corpus) == 0:
        raise ContractError("cannot train a language model on an empty corpus")
    directions = [FORWARD, BACKWARD] if config.bslm_directions == "both" else [FORWARD]
    models = {direction: init_slm(direction, len(corpus.vocab), config) for direction in directions}
    states = {direction: OptimizerState.from_config(config) for direction in directions}
    monitors = {
        direction: create_loss_monitor(config.smoothing_window, config.divergence_window, config.divergence_factor)
        for direction in directions
    }
    dropout_rngs = {direction: group_rng(config.seed, f"dropout.slm.{direction}") for direction in directions}
    log = TrainingLog(log_path, ["step", "lr", *(f"L_{d}" for d in directions), "tokens/sec"])
    smoothed = {direction: math.nan for direction in directions}

    plan = lambda epoch: batch_by_length(corpus, config.token_budget, config.seed, epoch)  # noqa: E731
    build = lambda indices: [corpus.sentences[i] for i in indices]  # noqa: E731
    step = 0
    started = time.perf_counter()
    with BatchPrefetcher(plan, build, config.prefetch, stop_event) as batches:
        for step, sentences in zip(range(1, config.lm_steps + 1), batches):
            lr = lr_schedule(step, config.d_model, config.warmup, config.lr_scale)
            losses = {}
            for direction in directions:
                model = models[direction]
                loss = lm_loss_batch(model, sentences, dropout_rngs[direction], config.dropout, eps=config.ln_eps)
                grads = backward(loss)
                clip_grad_norm(grads, config.clip_norm)
                adam_step(model.parameters(), grads, states[direction], lr)
                losses[direction] = loss.item()
                smoothed[direction] = monitors[direction](losses[direction])
            tokens = sum(len(s) for s in sentences)
            elapsed = max(time.perf_counter() - started, 1e-9)
            log.append(step, lr, *(losses[d] for d in directions), tokens / elapsed)
            started = time.perf_counter()
            if step % config.log_every == 0:
                logger.info(
                    "LM step %d lr %.3g %s", step, lr,
                    " ".join(f"{d}={smoothed[d]:.4f}" for d in directions),
                )
            if stop_event is not None and stop_event.is_set():
                logger.warning("Stopping LM training at step %d", step)
                break
    final = float(np.mean([smoothed[d] for d in directions])) if step else math.nan
    return BslmCheckpoint(models[FORWARD], models.get(BACKWARD), corpus.vocab, steps=step, final_loss=final)


# --- NMT training ---

def _check_bslm(bslm: Optional[BslmCheckpoint], vocab, config: TrainConfig, side: str) -> None:
    if bslm is None:
        return
    if bslm.vocab.content_hash != vocab.content_hash:
        raise VocabularyError(f"{side} BSLM vocabulary differs from the {side} corpus vocabulary")
    if bslm.num_layers != config.bslm_layers or bslm.width != config.d_model:
        raise ConfigError(
            f"{side} BSLM has M={bslm.num_layers}, d={bslm.width} but the config expects "
            f"M={config.bslm_layers}, d={config.d_model}"
        )


def evaluate_bleu(
    translator: Translator, corpus: ParallelCorpus, beam: int = 1, smoothing: bool = False, workers: int = 1
):
    hypotheses = translate_corpus(translator, corpus.source, beam, workers)
    hyp_text = [detokenize(corpus.tgt_vocab.decode_line(h.output_tokens)) for h in hypotheses]
    ref_text = [detokenize(corpus.tgt_vocab.decode_line(t)) for t in corpus.target]
    return bleu(hyp_text, ref_text, smoothing)


def _snapshot(model: NmtModel) -> Dict[str, np.ndarray]:
    return {name: tensor.data.copy() for name, tensor in model.all_tensors().items()}


def _restore(model: NmtModel, snapshot: Dict[str, np.ndarray]) -> None:
    for name, tensor in model.all_tensors().items():
        tensor.data = snapshot[name].copy()


def train_nmt(
    parallel: ParallelCorpus,
    src_bslm: Optional[BslmCheckpoint],
    tgt_bslm: Optional[BslmCheckpoint],
    config: TrainConfig,
    valid: Optional[ParallelCorpus] = None,
    log_path: Optional[Path] = None,
    stop_event: Optional[threading.Event] = None,
) -> NmtCheckpoint:
    """Joint training on L_T = L_M + L_E; the best validation-BLEU weights are kept.

    Validation during training decodes greedily. The kept weights then get a
    final evaluation with ``config.beam``, recorded as ``final_bleu``.
    """
    if len(parallel) == 0:
        raise ContractError("cannot train on an empty parallel corpus")
    needs_src = bool(config.fusion_layers()) or (config.kt != "off" and config.kt_side == "source")
    needs_tgt = config.kt != "off" and config.kt_side == "target"
    if needs_src and src_bslm is None:
        raise ConfigError("this configuration needs a source-side BSLM")
    if needs_tgt and tgt_bslm is None:
        raise ConfigError("this configuration needs a target-side BSLM")
    _check_bslm(src_bslm if needs_src else None, parallel.src_vocab, config, "source")
    _check_bslm(tgt_bslm if needs_tgt else None, parallel.tgt_vocab, config, "target")

    model = init_nmt(config, len(parallel.src_vocab), len(parallel.tgt_vocab))
    state = OptimizerState.from_config(config)
    monitor = create_loss_monitor(config.smoothing_window, config.divergence_window, config.divergence_factor)
    dropout_rng = group_rng(config.seed, "dropout.nmt")
    src_cache = RepresentationCache(src_bslm, config.cache_dir or None) if needs_src else None
    translator = Translator(model, src_cache, max_len=config.max_decode_len)
    log = TrainingLog(log_path, ["step", "lr", "L_M", "L_E", "L_T", "tokens/sec"])

    best_bleu, best_state, best_step = -math.inf, None, 0
    final_bleu = math.nan
    last = {"L_M": math.nan, "L_E": math.nan, "L_T": math.nan}
    plan = lambda epoch: batch_by_length(parallel, config.token_budget, config.seed, epoch)  # noqa: E731
    build = lambda indices: ([parallel.source[i] for i in indices], [parallel.target[i] for i in indices])  # noqa: E731
    step = 0
    started = time.perf_counter()
    with BatchPrefetcher(plan, build, config.prefetch, stop_event) as batches:
        for step, (sources, targets) in zip(range(1, config.max_steps + 1), batches):
            lr = lr_schedule(step, config.d_model, config.warmup, config.lr_scale)
            losses = compute_losses(model, sources, targets, src_cache, tgt_bslm if needs_tgt else None, dropout_rng)
            grads = backward(losses.L_T)
            clip_grad_norm(grads, config.clip_norm)
            adam_step(model.parameters(), grads, state, lr)

            last = {
                "L_M": losses.L_M.item(),
                "L_E": losses.L_E.item() if losses.L_E is not None else 0.0,
                "L_T": losses.L_T.item(),
            }
            smoothed = monitor(last["L_T"])
            elapsed = max(time.perf_counter() - started, 1e-9)
            log.append(step, lr, last["L_M"], last["L_E"], last["L_T"], losses.target_tokens / elapsed)
            started = time.perf_counter()
            if step % config.log_every == 0:
                gate = float(np.mean([g.mean() for g in losses.gates])) if losses.gates else math.nan
                logger.info("NMT step %d lr %.3g L_M %.4f L_E %.4f L_T(avg) %.4f gate %.3f",
                            step, lr, last["L_M"], last["L_E"], smoothed, gate)
            if valid is not None and step % config.validate_every == 0:
                report = evaluate_bleu(translator, valid, 1, config.bleu_smoothing, config.workers)
                logger.info("Validation at step %d: %s", step, report.summary())
                if report.score > best_bleu:
                    best_bleu, best_state, best_step = report.score, _snapshot(model), step
            if stop_event is not None and stop_event.is_set():
                logger.warning("Stopping NMT training at step %d", step)
                break

    if valid is not None:
        report = evaluate_bleu(translator, valid, 1, config.bleu_smoothing, config.workers)
        if report.score > best_bleu:
            best_bleu, best_state, best_step = report.score, None, step
        if best_state is not None:
            logger.info("Restoring weights from step %d (validation BLEU %.2f)", best_step, best_bleu)
            _restore(model, best_state)
        if stop_event is None or not stop_event.is_set():
            final = evaluate_bleu(translator, valid, config.beam, config.bleu_smoothing, config.workers)
            final_bleu = final.score
            logger.info("Final validation (beam %d): %s", config.beam, final.summary())
    return NmtCheckpoint(
        model,
        parallel.src_vocab,
        parallel.tgt_vocab,
        steps=step,
        losses=last,
        best_bleu=best_bleu if valid is not None else math.nan,
        final_bleu=final_bleu,
        src_bslm_hash=src_bslm.vocab.content_hash if needs_src else "",
        tgt_bslm_hash=tgt_bslm.vocab.content_hash if needs_tgt else "",
    )
