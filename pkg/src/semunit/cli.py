"""`semunit` command line: segmentation, span extraction, training, decoding, evaluation."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .bpe import BpeMergeTable, apply_bpe, learn_bpe, strip_bpe
from .checkpoint import CheckpointError, average_checkpoints, save_checkpoint
from .demo import StageError
from .corpus import CorpusError, Vocabulary, build_vocab, load_corpus, read_lines, write_corpus
from .wpe import (
    DEFAULT_DELTA,
    DEFAULT_MERGES,
    MAX_SPAN,
    SpanSet,
    WpeMergeTable,
    extract_spans,
    learn_wpe,
    random_spans,
    read_spans,
    write_spans,
)

logger = logging.getLogger("semunit")

SEED_ENV = "SEMUNIT_SEED"
GRANULARITY = ("wpe+bpe", "bpe-only", "wpe-only", "random")


class UsageError(Exception):
    """Flag combination rejected before any output is written."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"error: usage: {message}\n")


def _existing(path: str | None, flag: str) -> None:
    if path is not None and not Path(path).is_file():
        raise FileNotFoundError(f"{flag}: no such file {path}")


def _load_subword_corpus(path):
    return load_corpus(path, check_reserved=False)


# -- segmentation -----------------------------------------------------------

def cmd_learn_bpe(args) -> None:
    for p in args.input:
        _existing(p, "--input")
    corpus = [s for p in args.input for s in load_corpus(p)]
    table = learn_bpe(corpus, args.merges, min_frequency=args.min_frequency)
    table.save(args.output)
    logger.info("wrote %d merges to %s", len(table), args.output)


def cmd_learn_wpe(args) -> None:
    _existing(args.input, "--input")
    table = learn_wpe(load_corpus(args.input), args.merges, args.delta)
    table.save(args.output)
    logger.info("wrote %d merges to %s", len(table), args.output)


def cmd_apply_bpe(args) -> None:
    _existing(args.codes, "--codes")
    _existing(args.input, "--input")
    table = BpeMergeTable.load(args.codes)
    write_corpus(args.output, (apply_bpe(s, table) for s in load_corpus(args.input)))


def cmd_extract_spans(args) -> None:
    mode = args.mode
    if mode in ("wpe+bpe", "wpe-only") and not args.wpe:
        raise UsageError(f"--mode {mode} needs --wpe")
    if mode in ("bpe-only", "random") and args.wpe:
        raise UsageError(f"--mode {mode} does not take --wpe")
    if mode != "random" and args.ratio is not None:
        raise UsageError("--ratio only applies to --mode random")
    if args.max_span < 1:
        raise UsageError("--max-span must be >= 1")
    for path, flag in ((args.input, "--input"), (args.bpe, "--bpe"), (args.wpe, "--wpe")):
        _existing(path, flag)

    bpe = BpeMergeTable.load(args.bpe)
    wpe = WpeMergeTable.load(args.wpe) if args.wpe else WpeMergeTable([], DEFAULT_DELTA)
    texts, spans = [], []
    for i, sent in enumerate(load_corpus(args.input)):
        if mode == "random":
            sub = apply_bpe(sent, bpe)
            ratio = 0.36 if args.ratio is None else args.ratio
            ss = random_spans(len(sub), ratio, seed=args.seed * 1_000_003 + i, max_len=args.max_span)
        else:
            sub, ss = extract_spans(sent, wpe, bpe, args.max_span, word_units=(mode != "wpe-only"))
        texts.append(sub)
        spans.append(ss)
    write_corpus(args.output_text, texts)
    write_spans(args.output_spans, spans)
    covered = sum(ss.covered() for ss in spans)
    total = sum(ss.sentence_len for ss in spans)
    logger.info("%d sentences, %.1f%% of subwords inside multi-token spans",
                len(spans), 100.0 * covered / max(total, 1))


# -- training and decoding --------------------------------------------------

def _read_span_file(path, subword_sents) -> list[SpanSet]:
    if path is None:
        return [SpanSet.singletons(len(s)) for s in subword_sents]
    return read_spans(path, [len(s) for s in subword_sents])


def cmd_train(args) -> None:
    import torch

    from .model import INPUT_MODES, ModelConfig
    from .training import TrainConfig, train

    if args.mode not in INPUT_MODES:
        raise UsageError(f"--mode must be one of {', '.join(INPUT_MODES)}")
    if args.keep_last is not None and args.keep_last < 1:
        raise UsageError("--keep-last must be >= 1")
    if args.init and args.resume:
        raise UsageError("--init and --resume are mutually exclusive")
    if args.mode != "token-only" and args.spans is None:
        logger.warning("no --spans given; every token is its own semantic unit")
    for path, flag in ((args.src, "--src"), (args.tgt, "--tgt"), (args.spans, "--spans"),
                       (args.init, "--init"), (args.resume, "--resume"),
                       (args.src_vocab, "--src-vocab"), (args.tgt_vocab, "--tgt-vocab")):
        _existing(path, flag)

    torch.set_num_threads(args.threads)
    src = _load_subword_corpus(args.src)
    tgt = _load_subword_corpus(args.tgt)
    if len(src) != len(tgt):
        raise CorpusError(f"--src has {len(src)} lines, --tgt has {len(tgt)}")
    spans = _read_span_file(args.spans, src)
    sv = Vocabulary.load(args.src_vocab) if args.src_vocab else build_vocab(src)
    tv = Vocabulary.load(args.tgt_vocab) if args.tgt_vocab else build_vocab(tgt)
    examples = [(sv.encode(s), tv.encode(t), ss) for s, t, ss in zip(src, tgt, spans)]

    mc = ModelConfig(
        len(sv), len(tv), d_model=args.d_model, d_ffn=args.d_ffn, enc_layers=args.layers,
        dec_layers=args.layers, heads=args.heads, asf_heads=args.asf_heads,
        dropout=args.dropout, input_mode=args.mode, max_span=args.max_span,
    )
    tc = TrainConfig(
        seed=args.seed, lr=args.lr, warmup=args.warmup, max_tokens=args.max_tokens,
        epochs=args.epochs, max_steps=args.max_steps, smoothing=args.smoothing,
        save_every=args.save_every, precision=args.precision,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sv.save(out / "src.vocab")
    tv.save(out / "tgt.vocab")

    def on_step(step, loss, lr):
        if step % args.log_every == 0:
            logger.info("step %d  lr %.2e  loss/token %.4f", step, lr, loss)

    result = train(mc, tc, examples, out, init=args.init, resume=args.resume,
                   prefix=args.prefix, on_step=on_step, keep_last=args.keep_last)
    if result.losses:
        logger.info("finished at step %d, last loss/token %.4f", result.step, result.losses[-1])


def cmd_translate(args) -> None:
    import torch

    from .model import greedy_batch, translate_ids
    from .training import make_batch, model_from_checkpoint

    if args.beam < 1:
        raise UsageError("--beam must be >= 1")
    for path, flag in ((args.checkpoint, "--checkpoint"), (args.input, "--input"),
                       (args.spans, "--spans"), (args.src_vocab, "--src-vocab"),
                       (args.tgt_vocab, "--tgt-vocab")):
        _existing(path, flag)
    torch.set_num_threads(args.threads)
    model = model_from_checkpoint(args.checkpoint, input_mode=args.mode)
    sv, tv = Vocabulary.load(args.src_vocab), Vocabulary.load(args.tgt_vocab)
    if len(sv) != model.config.src_vocab or len(tv) != model.config.tgt_vocab:
        raise CorpusError("vocabulary sizes do not match the checkpoint")
    src = _load_subword_corpus(args.input)
    spans = _read_span_file(args.spans, src)
    ids = [sv.encode(s) for s in src]
    out = []
    if args.beam == 1:
        for lo in range(0, len(ids), args.batch_size):
            chunk = list(range(lo, min(lo + args.batch_size, len(ids))))
            examples = [(ids[i], [], spans[i]) for i in chunk]
            b = make_batch(examples, range(len(chunk)))
            max_len = min(model.config.max_len - 1, 2 * b.src.shape[1] + 10)
            out.extend(greedy_batch(model, b.src, b.spans, max_len))
    else:
        out = [translate_ids(model, s, ss, beam=args.beam) for s, ss in zip(ids, spans)]
    hyps = [tv.decode(o) for o in out]
    if args.strip_bpe:
        hyps = [strip_bpe(h, strict=False) for h in hyps]
    with open(args.output, "w", encoding="utf-8", newline="\n") as f:
        for h in hyps:
            f.write(" ".join(h) + "\n")


def cmd_average(args) -> None:
    for p in args.inputs:
        _existing(p, "--inputs")
    paths = list(args.inputs)
    if args.last is not None:
        if args.last < 1:
            raise UsageError("--last must be >= 1")
        paths = sorted(paths)[-args.last:]
    save_checkpoint(args.output, average_checkpoints(paths))
    logger.info("averaged %d checkpoints into %s", len(paths), args.output)


# -- evaluation -------------------------------------------------------------

def _text_lines(path) -> list[list[str]]:
    return [line.split() for line in read_lines(path)]


def evaluation_report(args) -> list[str]:
    from .metrics import (bleu, bucket_by_span_count, chrf, load_alignments,
                          semantic_recall_counts, sentence_bleu)

    hyps, refs = _text_lines(args.hyp), _text_lines(args.ref)
    if len(hyps) != len(refs):
        raise CorpusError(f"--hyp has {len(hyps)} lines, --ref has {len(refs)}")
    lines = [f"sentences: {len(refs)}"]
    metrics = args.metrics.split(",")
    if "bleu" in metrics:
        lines.append(f"bleu: {bleu(hyps, refs):.4f}")
    if "chrf" in metrics:
        lines.append(f"chrf: {chrf(hyps, refs):.4f}")
    spans = None
    if args.spans:
        src = _load_subword_corpus(args.src)
        spans = read_spans(args.spans, [len(s) for s in src])
    if args.align:
        aligns = load_alignments(args.align)
        modes = ("S", "S+P") if args.recall_mode == "both" else (args.recall_mode,)
        for m in modes:
            rc = semantic_recall_counts(hyps, refs, aligns, spans, m, src)
            key = "recall_S" if m == "S" else "recall_SP"
            value = "no-units" if rc.recall is None else f"{rc.recall:.4f}"
            lines.append(f"{key}: {value}")
            lines.append(f"{key}_words: {rc.matched}/{rc.total}")
    if args.buckets:
        per = [sentence_bleu(h, r) for h, r in zip(hyps, refs)]
        lines.extend(bucket_by_span_count(per, spans).lines("sentence_bleu"))
    return lines


def cmd_evaluate(args) -> None:
    if (args.align or args.buckets) and not args.spans:
        raise UsageError("--align and --buckets need --spans and --src")
    if args.spans and not args.src:
        raise UsageError("--spans needs --src (the segmented source text)")
    for name in args.metrics.split(","):
        if name not in ("bleu", "chrf", ""):
            raise UsageError(f"unknown metric {name!r}")
    for path, flag in ((args.hyp, "--hyp"), (args.ref, "--ref"), (args.align, "--align"),
                       (args.spans, "--spans"), (args.src, "--src")):
        _existing(path, flag)
    text = "\n".join(evaluation_report(args)) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_demo(args) -> None:
    from .demo import pipeline_demo

    report = pipeline_demo(args.out_dir, seed=args.seed, src=args.src, tgt=args.tgt, align=args.align)
    sys.stdout.write("\n".join(report) + "\n")


# -- parser -----------------------------------------------------------------

def _read_config(path: str) -> dict[str, str]:
    conf = {}
    for lineno, raw in enumerate(read_lines(path), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        conf[key.strip().replace("-", "_")] = value.strip()
    return conf


def build_parser() -> argparse.ArgumentParser:
    env_seed = os.environ.get(SEED_ENV)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=int(env_seed) if env_seed else 1,
                        help=f"random seed (default: ${SEED_ENV} or 1)")
    common.add_argument("--precision", type=int, choices=(32, 64), default=32)
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="semunit", description=__doc__)
    p.add_argument("--version", action="version", version=f"semunit {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("learn-bpe", parents=[common], help="learn BPE merges")
    s.add_argument("--input", nargs="+", required=True,
                   help="training text; several files are learned jointly")
    s.add_argument("--merges", type=int, default=32768)
    s.add_argument("--min-frequency", type=int, default=2)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_learn_bpe)

    s = sub.add_parser("learn-wpe", parents=[common], help="learn WPE phrase merges")
    s.add_argument("--input", required=True)
    s.add_argument("--merges", type=int, default=DEFAULT_MERGES)
    s.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_learn_wpe)

    s = sub.add_parser("apply-bpe", parents=[common], help="segment text with BPE")
    s.add_argument("--codes", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_apply_bpe)

    s = sub.add_parser("extract-spans", parents=[common], help="segment text and locate semantic units")
    s.add_argument("--input", required=True, help="raw (word-level) text")
    s.add_argument("--bpe", required=True)
    s.add_argument("--wpe")
    s.add_argument("--mode", choices=GRANULARITY, default="wpe+bpe")
    s.add_argument("--ratio", type=float, help="covered-token ratio for --mode random (default 0.36)")
    s.add_argument("--max-span", type=int, default=MAX_SPAN)
    s.add_argument("--output-text", required=True)
    s.add_argument("--output-spans", required=True)
    s.set_defaults(func=cmd_extract_spans)

    s = sub.add_parser("train", parents=[common], help="train an SU4MT or baseline model")
    s.add_argument("--config", help="key=value file; explicit flags take precedence")
    s.add_argument("--src", required=True, help="segmented source text")
    s.add_argument("--tgt", required=True, help="segmented target text")
    s.add_argument("--spans", help="span file for the source side")
    s.add_argument("--src-vocab")
    s.add_argument("--tgt-vocab")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--prefix", default="checkpoint")
    s.add_argument("--mode", default="token+semantic")
    s.add_argument("--d-model", type=int, default=64)
    s.add_argument("--d-ffn", type=int, default=256)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--asf-heads", type=int)
    s.add_argument("--dropout", type=float, default=0.1)
    s.add_argument("--max-span", type=int, default=MAX_SPAN)
    s.add_argument("--lr", type=float, default=7e-4)
    s.add_argument("--warmup", type=int, default=100)
    s.add_argument("--max-tokens", type=int, default=1000)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--smoothing", type=float, default=0.0)
    s.add_argument("--save-every", type=int, default=1, help="epochs between checkpoints")
    s.add_argument("--keep-last", type=int, help="delete all but the newest N checkpoints of this run")
    s.add_argument("--init", help="pretrained baseline checkpoint (pretrain-finetune)")
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--log-every", type=int, default=20)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", parents=[common], help="decode with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--src-vocab", required=True)
    s.add_argument("--tgt-vocab", required=True)
    s.add_argument("--input", required=True, help="segmented source text")
    s.add_argument("--spans")
    s.add_argument("--mode", help="override the checkpoint's encoder input mode")
    s.add_argument("--beam", type=int, default=1)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--strip-bpe", action="store_true", help="undo @@ segmentation in the output")
    s.add_argument("--output", required=True)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", parents=[common], help="BLEU, chrF, recall and span buckets")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--metrics", default="bleu,chrf")
    s.add_argument("--align", help="alignment file, 1-based i-j (sure) / i?j (possible)")
    s.add_argument("--spans", help="source span file")
    s.add_argument("--src", help="segmented source text the spans refer to")
    s.add_argument("--recall-mode", choices=("S", "S+P", "both"), default="both")
    s.add_argument("--buckets", action="store_true", help="sentence BLEU by span count")
    s.add_argument("--output")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("average-checkpoints", parents=[common], help="average model parameters")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--last", type=int, help="average only the last N inputs (sorted by name)")
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_average)

    s = sub.add_parser("demo", parents=[common], help="run the whole pipeline on the bundled toy corpus")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--src", help="source corpus (default: bundled toy corpus)")
    s.add_argument("--tgt", help="target corpus (default: bundled toy corpus)")
    s.add_argument("--align", help="source-target word alignment for the recall lines")
    s.set_defaults(func=cmd_demo)
    return p


def _apply_config(parser, args, argv):
    conf = _read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    for key, value in conf.items():
        if key not in known or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        action = known[key]
        sub.set_defaults(**{key: action.type(value) if action.type else value})
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 2
    level = logging.WARNING - 10 * args.verbose
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "config", None):
            args = _apply_config(parser, args, argv)
        args.func(args)
    except StageError as exc:
        print(f"error: stage: {exc}", file=sys.stderr)
        return 1
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    except (CorpusError, CheckpointError) as exc:
        print(f"error: format: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
