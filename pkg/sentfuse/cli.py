"""Command-line entry point: ``sentfuse <subcommand> ...``."""
from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import psutil
from dotenv import load_dotenv

from . import synthetic
from .bslm import RepresentationCache
from .checkpoint import load_bslm, load_nmt, load_referenced_bslm, save_bslm, save_nmt
from .config import TrainConfig, config_lines, load_config, parse_assignments
from .data import (
    MergeTable,
    Vocabulary,
    bpe_learn,
    build_vocabulary,
    detokenize,
    read_mono_corpus,
    read_parallel_corpus,
    segment_line,
)
from .decoding import Translator, bleu, throughput_benchmark, translate_corpus
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    OversizeSentenceError,
    SentfuseError,
    VocabularyError,
)
from .io_utils import read_lines, write_lines
from .training import train_nmt, train_slm

logger = logging.getLogger("sentfuse")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
USAGE_ERRORS = (ConfigError, VocabularyError, OversizeSentenceError, CheckpointError, ContractError, FileNotFoundError)
MIN_BENCH_REPS = 3


class UsageError(Exception):
    """Bad flags or missing inputs detected by the CLI itself."""


def _report_error(message: str, exc: Optional[BaseException] = None) -> None:
    if exc:
        logger.error("%s: %s", message, exc)
        logger.debug("Traceback", exc_info=(type(exc), exc, exc.__traceback__))
    else:
        logger.error(message)


def _require_files(*paths: Optional[str]) -> None:
    for path in paths:
        if path and not Path(path).is_file():
            raise UsageError(f"input file {path} does not exist")


@contextlib.contextmanager
def _interruptible(stop_event: threading.Event) -> Iterator[None]:
    """Ctrl+C sets ``stop_event`` so training stops at the next step and still saves."""

    def _handle_sigint(signum, frame):
        if stop_event.is_set():
            raise KeyboardInterrupt
        logger.warning("Received Ctrl+C, finishing the current step (press again to abort)...")
        stop_event.set()

    previous_handler = None
    if threading.current_thread() is threading.main_thread():
        previous_handler = signal.getsignal(signal.SIGINT)
        signal.signal(signal.SIGINT, _handle_sigint)
    try:
        yield
    finally:
        if previous_handler is not None:
            signal.signal(signal.SIGINT, previous_handler)


def _resolve_config(args: argparse.Namespace, **forced) -> TrainConfig:
    overrides: Dict[str, object] = parse_assignments(getattr(args, "set", None) or [])
    for key in ("seed", "fusion", "kt", "beam", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    overrides.update({k: v for k, v in forced.items() if v is not None})
    return load_config(getattr(args, "config", None), overrides)


def _log_run_header(command: str, config: Optional[TrainConfig]) -> None:
    logger.info("sentfuse %s (cpus=%s)", command, psutil.cpu_count(logical=True))
    if config is not None:
        logger.info("seed=%d", config.seed)
        for line in config_lines(config):
            logger.info("  %s", line)


# --- subcommands ---

def cmd_bpe(args: argparse.Namespace) -> int:
    _require_files(*args.input)
    if args.action == "learn":
        lines = [line for path in args.input for line in read_lines(path)]
        table = bpe_learn(lines, args.merges)
        table.save(args.output)
        logger.info("Learned %d merges into %s", len(table), args.output)
        return EXIT_OK
    if not args.codes:
        raise UsageError("bpe apply needs --codes")
    _require_files(args.codes)
    table = MergeTable.load(args.codes)
    lines = [segment_line(line, table) for path in args.input for line in read_lines(path)]
    write_lines(args.output, lines)
    logger.info("Segmented %d lines into %s", len(lines), args.output)
    return EXIT_OK


def cmd_vocab(args: argparse.Namespace) -> int:
    _require_files(*args.input)
    lines = [line for path in args.input for line in read_lines(path)]
    vocab = build_vocabulary(lines, args.size)
    vocab.save(args.output)
    logger.info("Wrote %d tokens to %s (hash %s)", len(vocab), args.output, vocab.content_hash[:12])
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out_dir)
    if args.task == "grammar":
        write_lines(out / "grammar.txt", synthetic.grammar_corpus(args.count, args.seed))
        write_lines(out / "grammar.valid.txt", synthetic.grammar_corpus(max(args.count // 10, 1), args.seed + 1))
    else:
        sources, targets = synthetic.translation_task(args.count, args.seed)
        write_lines(out / "train.src", sources)
        write_lines(out / "train.tgt", targets)
        valid_src, valid_tgt = synthetic.translation_task(max(args.count // 10, 1), args.seed + 1)
        write_lines(out / "valid.src", valid_src)
        write_lines(out / "valid.tgt", valid_tgt)
        if args.mono:
            write_lines(out / "mono.src", synthetic.monolingual_task(args.mono, args.seed, "source"))
            write_lines(out / "mono.tgt", synthetic.monolingual_task(args.mono, args.seed, "target"))
    logger.info("Wrote synthetic %s corpus to %s", args.task, out)
    return EXIT_OK


def _vocab_for(path: Optional[str], lines: List[str], config: TrainConfig) -> Vocabulary:
    if path:
        _require_files(path)
        return Vocabulary.load(path)
    return build_vocabulary(lines, config.vocab_size)


def cmd_train_lm(args: argparse.Namespace) -> int:
    _require_files(args.corpus, args.vocab)
    config = _resolve_config(args, bslm_directions=args.direction)
    _log_run_header("train-lm", config)
    vocab = _vocab_for(args.vocab, read_lines(args.corpus), config)
    corpus = read_mono_corpus(args.corpus, vocab)
    stop_event = threading.Event()
    with _interruptible(stop_event):
        ckpt = train_slm(corpus, config, args.log, stop_event)
    save_bslm(ckpt, args.output, config)
    logger.info("BSLM trained for %d steps, final loss %.4f", ckpt.steps, ckpt.final_loss)
    return EXIT_OK


def cmd_train_nmt(args: argparse.Namespace) -> int:
    src_path, tgt_path = args.parallel
    _require_files(src_path, tgt_path, args.src_bslm, args.tgt_bslm, args.src_vocab, args.tgt_vocab,
                   *(args.valid or ()))
    src_bslm = load_bslm(args.src_bslm) if args.src_bslm else None
    tgt_bslm = load_bslm(args.tgt_bslm) if args.tgt_bslm else None
    reference = src_bslm or tgt_bslm
    config = _resolve_config(
        args,
        bslm_layers=reference.num_layers if reference else None,
        d_model=reference.width if reference else None,
    )
    _log_run_header("train-nmt", config)

    src_lines, tgt_lines = read_lines(src_path), read_lines(tgt_path)
    if config.shared_vocab:
        src_vocab = tgt_vocab = _vocab_for(args.src_vocab, src_lines + tgt_lines, config)
    else:
        src_vocab = src_bslm.vocab if src_bslm and not args.src_vocab else _vocab_for(args.src_vocab, src_lines, config)
        tgt_vocab = tgt_bslm.vocab if tgt_bslm and not args.tgt_vocab else _vocab_for(args.tgt_vocab, tgt_lines, config)
    parallel = read_parallel_corpus(src_path, tgt_path, src_vocab, tgt_vocab)
    valid = read_parallel_corpus(args.valid[0], args.valid[1], src_vocab, tgt_vocab) if args.valid else None

    stop_event = threading.Event()
    with _interruptible(stop_event):
        ckpt = train_nmt(parallel, src_bslm, tgt_bslm, config, valid, args.log, stop_event)
    if ckpt.src_bslm_hash:
        ckpt.src_bslm_path = str(Path(args.src_bslm).resolve())
    if ckpt.tgt_bslm_hash:
        ckpt.tgt_bslm_path = str(Path(args.tgt_bslm).resolve())
    save_nmt(ckpt, args.output)
    return EXIT_OK


def _load_translator(model_path: str, cached: bool = True):
    ckpt = load_nmt(model_path)
    src_bslm = load_referenced_bslm(ckpt, "source") if ckpt.model.fusion is not None else None
    if ckpt.model.fusion is not None and src_bslm is None:
        raise CheckpointError(f"{model_path} uses fusion but names no source BSLM")
    source = RepresentationCache(src_bslm) if (cached and src_bslm is not None) else src_bslm
    return ckpt, Translator(ckpt.model, source)


def cmd_translate(args: argparse.Namespace) -> int:
    _require_files(args.model, args.input)
    ckpt, translator = _load_translator(args.model)
    lines = read_lines(args.input)
    outputs: List[str] = [""] * len(lines)
    todo = [(i, ckpt.src_vocab.encode_line(line)) for i, line in enumerate(lines) if line.strip()]
    hypotheses = translate_corpus(translator, [ids for _, ids in todo], args.beam, args.workers or 1)
    for (index, _), hypothesis in zip(todo, hypotheses):
        text = ckpt.tgt_vocab.decode_line(hypothesis.output_tokens)
        outputs[index] = text if args.keep_bpe else detokenize(text)
    write_lines(args.output, outputs)
    logger.info("Translated %d lines into %s", len(todo), args.output)
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    _require_files(args.hyp, *args.ref)
    hypotheses = read_lines(args.hyp)
    references = [read_lines(path) for path in args.ref]
    for path, refs in zip(args.ref, references):
        if len(refs) != len(hypotheses):
            raise UsageError(f"{args.hyp} has {len(hypotheses)} lines but {path} has {len(refs)}")
    grouped = [list(group) for group in zip(*references)] if references else []
    report = bleu(hypotheses, grouped, smoothing=args.smooth)
    print(report.summary())
    print(report.tsv_line())
    return EXIT_OK


def cmd_export_heatmap(args: argparse.Namespace) -> int:
    _require_files(args.model)
    ckpt = load_nmt(args.model)
    if ckpt.model.fusion is None:
        raise ConfigError(f"{args.model} was trained with fusion=off and has no fusion weights")
    matrix = ckpt.model.fusion.heatmap()
    target = Path(args.out)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["layer", *(f"bslm{m + 1}" for m in range(matrix.shape[1]))])
        for n, row in enumerate(matrix):
            writer.writerow([f"encoder{n + 1}", *(repr(float(v)) for v in row)])
    logger.info("Wrote %dx%d fusion heatmap to %s", matrix.shape[0], matrix.shape[1], target)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    if args.reps < MIN_BENCH_REPS:
        raise UsageError(f"--reps must be at least {MIN_BENCH_REPS}, got {args.reps}")
    _require_files(args.baseline, args.fused, args.corpus)
    lines = [line for line in read_lines(args.corpus) if line.strip()]
    print("config\tsentences\tbeam\tmedian_sec\tsent_per_sec\tcpu_percent\trss_mb")
    reports = []
    for label, path in (("baseline", args.baseline), ("fused", args.fused)):
        ckpt, translator = _load_translator(path, cached=False)
        sources = [ckpt.src_vocab.encode_line(line) for line in lines]
        report = throughput_benchmark(translator, sources, args.reps, args.beam, label)
        reports.append(report)
        print(report.tsv_line())
    ratio = reports[1].sentences_per_second / reports[0].sentences_per_second
    print(f"fused/baseline\t{ratio:.3f}")
    return EXIT_OK


# --- parser ---

def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file (default: $SENTFUSE_CONFIG)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    parser.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sentfuse", description="BSLM-fused Transformer translation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    bpe = sub.add_parser("bpe", help="learn or apply BPE merges")
    bpe.add_argument("action", choices=["learn", "apply"])
    bpe.add_argument("--input", nargs="+", required=True)
    bpe.add_argument("--output", required=True)
    bpe.add_argument("--merges", type=int, default=1000, help="number of merges to learn")
    bpe.add_argument("--codes", help="merge table to apply")
    bpe.set_defaults(handler=cmd_bpe)

    vocab = sub.add_parser("vocab", help="build a vocabulary file")
    vocab.add_argument("--input", nargs="+", required=True)
    vocab.add_argument("--output", required=True)
    vocab.add_argument("--size", type=int, default=32000)
    vocab.set_defaults(handler=cmd_vocab)

    synth = sub.add_parser("synth", help="write synthetic corpora")
    synth.add_argument("--task", choices=["translation", "grammar"], default="translation")
    synth.add_argument("--count", type=int, default=2000)
    synth.add_argument("--mono", type=int, default=0, help="monolingual sentences per side")
    synth.add_argument("--seed", type=int, default=1)
    synth.add_argument("--out-dir", required=True)
    synth.set_defaults(handler=cmd_synth)

    lm = sub.add_parser("train-lm", help="pretrain forward/backward SLMs")
    lm.add_argument("--corpus", required=True)
    lm.add_argument("--vocab")
    lm.add_argument("--direction", choices=["both", "forward"], default="both")
    lm.add_argument("--output", required=True)
    lm.add_argument("--log")
    _add_config_flags(lm)
    lm.set_defaults(handler=cmd_train_lm)

    nmt = sub.add_parser("train-nmt", help="train the NMT model")
    nmt.add_argument("--parallel", nargs=2, metavar=("SRC", "TGT"), required=True)
    nmt.add_argument("--valid", nargs=2, metavar=("SRC", "TGT"))
    nmt.add_argument("--src-bslm")
    nmt.add_argument("--tgt-bslm")
    nmt.add_argument("--src-vocab")
    nmt.add_argument("--tgt-vocab")
    nmt.add_argument("--fusion", choices=["off", "shallow", "deep"])
    nmt.add_argument("--kt", choices=["off", "shallow", "deep"])
    nmt.add_argument("--output", required=True)
    nmt.add_argument("--log")
    _add_config_flags(nmt)
    nmt.set_defaults(handler=cmd_train_nmt)

    tr = sub.add_parser("translate", help="decode a source file")
    tr.add_argument("--model", required=True)
    tr.add_argument("--input", required=True)
    tr.add_argument("--output", required=True)
    tr.add_argument("--beam", type=int, default=4)
    tr.add_argument("--workers", type=int, default=1)
    tr.add_argument("--keep-bpe", action="store_true", help="write subwords instead of words")
    tr.set_defaults(handler=cmd_translate)

    score = sub.add_parser("score", help="corpus BLEU")
    score.add_argument("--hyp", required=True)
    score.add_argument("--ref", nargs="+", required=True)
    score.add_argument("--smooth", action="store_true", help="add-one smoothing")
    score.set_defaults(handler=cmd_score)

    heat = sub.add_parser("export-heatmap", help="write row-normalized fusion weights as CSV")
    heat.add_argument("--model", required=True)
    heat.add_argument("--out", required=True)
    heat.set_defaults(handler=cmd_export_heatmap)

    bench = sub.add_parser("bench", help="decoding throughput, baseline vs fused")
    bench.add_argument("--baseline", required=True)
    bench.add_argument("--fused", required=True)
    bench.add_argument("--corpus", required=True)
    bench.add_argument("--reps", type=int, default=MIN_BENCH_REPS)
    bench.add_argument("--beam", type=int, default=4)
    bench.set_defaults(handler=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except UsageError as exc:
        _report_error("Usage error", exc)
        return EXIT_USAGE
    except USAGE_ERRORS as exc:
        _report_error("Invalid input", exc)
        return EXIT_USAGE
    except SentfuseError as exc:
        _report_error(f"{args.command} failed", exc)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        _report_error("Interrupted")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
