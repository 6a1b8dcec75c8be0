"""End-to-end smoke run on the bundled toy corpus, driven through the CLI."""

from __future__ import annotations

import contextlib
import io
from importlib import resources
from pathlib import Path

import torch

from .bpe import BpeMergeTable, apply_bpe, strip_bpe
from .checkpoint import average_checkpoints, load_checkpoint
from .corpus import Vocabulary, load_corpus, read_lines
from .metrics import bleu, chrf
from .model import INPUT_MODES
from .training import evaluate_loss, model_from_checkpoint
from .wpe import MAX_SPAN, WpeMergeTable, extract_spans, read_spans

# small enough to finish in well under a minute on one core
DEMO_FLAGS = {
    "bpe_merges": 60,
    "wpe_merges": 50,
    "wpe_delta": 5.0,
    "train": ["--d-model", "64", "--d-ffn", "256", "--layers", "2", "--heads", "4",
              "--dropout", "0", "--lr", "2e-3", "--warmup", "50", "--max-tokens", "1000",
              "--save-every", "1"],
    "pretrain_epochs": 40,
    "finetune_epochs": 40,
    "average_last": 5,
}


class StageError(RuntimeError):
    def __init__(self, stage: str, detail: str):
        super().__init__(f"stage {stage} failed: {detail}")
        self.stage = stage


def bundled_paths() -> tuple[Path, Path, Path]:
    base = resources.files("semunit") / "data"
    return tuple(Path(str(base / name)) for name in ("toy.src", "toy.tgt", "toy.align"))


def _run(stage: str, argv: list[str]) -> None:
    from .cli import main

    err = io.StringIO()
    with contextlib.redirect_stderr(err):
        code = main(argv)
    if code != 0:
        lines = err.getvalue().strip().splitlines()
        raise StageError(stage, lines[-1] if lines else f"exit code {code}")


def _check(name: str, ok: bool) -> str:
    return f"check {name}: {'PASS' if ok else 'FAIL'}"


def _invariant_checks(work: Path, src_raw, bpe_src, wpe, sub_src, spans, model, avg, ckpts) -> list[str]:
    lines = []
    lines.append(_check("bpe_roundtrip", all(strip_bpe(apply_bpe(s, bpe_src)) == s for s in src_raw)))
    lines.append(_check("text_invariance", all(
        extract_spans(s, wpe, bpe_src)[0] == apply_bpe(s, bpe_src) == sw
        for s, sw in zip(src_raw, sub_src)
    )))
    lines.append(_check("span_partition", all(ss.sentence_len == len(sw) for ss, sw in zip(spans, sub_src))))
    lines.append(_check("max_span", all(ss.max_len() <= MAX_SPAN for ss in spans)))

    gen = torch.Generator().manual_seed(0)
    ids = torch.randint(4, model.config.src_vocab, (1, len(sub_src[0])), generator=gen)
    n_tok, n_sem = len(sub_src[0]), len(spans[0])
    expect = {"token+semantic": n_tok + n_sem, "token-x2": 2 * n_tok, "semantic-x2": 2 * n_sem,
              "token-only": n_tok, "semantic-only": n_sem}
    with torch.no_grad():
        lengths_ok = all(
            model.encode(ids, [spans[0]], mode=m).states.shape[1] == expect[m] for m in INPUT_MODES
        )
    lines.append(_check("encoder_lengths", lengths_ok))

    one = load_checkpoint(ckpts[-1])
    same = average_checkpoints([one, one, one])
    lines.append(_check("average_identity", all(
        same.arrays[k].tobytes() == one.arrays[k].tobytes() for k in one.params()
    )))
    lines.append(_check("average_window", avg.meta.get("averaged") == DEMO_FLAGS["average_last"]))
    return lines


def pipeline_demo(out_dir: str | Path, seed: int = 1, src=None, tgt=None, align=None) -> list[str]:
    """Run every pipeline stage and return the report as key: value lines.

    The report holds no paths or timings, so two runs with the same seed
    produce identical text.
    """
    torch.set_num_threads(1)
    work = Path(out_dir)
    work.mkdir(parents=True, exist_ok=True)
    d_src, d_tgt, d_align = bundled_paths()
    if src is None and tgt is None:
        src, tgt, align = d_src, d_tgt, d_align
    elif src is None or tgt is None:
        raise StageError("setup", "give both a source and a target corpus")
    src, tgt = str(src), str(tgt)
    s = ["--seed", str(seed)]
    f = DEMO_FLAGS

    _run("learn-bpe", ["learn-bpe", *s, "--input", src, "--merges", str(f["bpe_merges"]),
                       "--output", str(work / "src.bpe")])
    _run("learn-bpe", ["learn-bpe", *s, "--input", tgt, "--merges", str(f["bpe_merges"]),
                       "--output", str(work / "tgt.bpe")])
    _run("learn-wpe", ["learn-wpe", *s, "--input", src, "--merges", str(f["wpe_merges"]),
                       "--delta", str(f["wpe_delta"]), "--output", str(work / "src.wpe")])
    _run("extract-spans", ["extract-spans", *s, "--input", src, "--bpe", str(work / "src.bpe"),
                           "--wpe", str(work / "src.wpe"), "--mode", "wpe+bpe",
                           "--output-text", str(work / "train.src"),
                           "--output-spans", str(work / "train.spans")])
    _run("apply-bpe", ["apply-bpe", *s, "--codes", str(work / "tgt.bpe"), "--input", tgt,
                       "--output", str(work / "train.tgt")])

    data = ["--src", str(work / "train.src"), "--tgt", str(work / "train.tgt")]
    _run("pretrain", ["train", *s, *data, *f["train"], "--mode", "token-only",
                      "--epochs", str(f["pretrain_epochs"]), "--keep-last", "1", "--out-dir", str(work / "pretrain")])
    pre = sorted((work / "pretrain").glob("checkpoint*.ckpt"))
    if not pre:
        raise StageError("pretrain", "no checkpoint written")
    vocabs = ["--src-vocab", str(work / "pretrain" / "src.vocab"),
              "--tgt-vocab", str(work / "pretrain" / "tgt.vocab")]
    _run("finetune", ["train", *s, *data, *vocabs, *f["train"], "--mode", "token+semantic",
                      "--spans", str(work / "train.spans"), "--init", str(pre[-1]),
                      "--epochs", str(f["finetune_epochs"]),
                      "--keep-last", str(f["average_last"]), "--out-dir", str(work / "finetune")])
    ft = sorted((work / "finetune").glob("checkpoint*.ckpt"))
    _run("average-checkpoints", ["average-checkpoints", *s, "--inputs", *map(str, ft),
                                 "--last", str(f["average_last"]),
                                 "--output", str(work / "average.ckpt")])
    _run("translate", ["translate", *s, "--checkpoint", str(work / "average.ckpt"), *vocabs,
                       "--input", str(work / "train.src"), "--spans", str(work / "train.spans"),
                       "--output", str(work / "hyp.sw")])
    _run("translate", ["translate", *s, "--checkpoint", str(work / "average.ckpt"), *vocabs,
                       "--input", str(work / "train.src"), "--spans", str(work / "train.spans"),
                       "--strip-bpe", "--output", str(work / "hyp.txt")])
    ev = ["evaluate", *s, "--hyp", str(work / "hyp.txt"), "--ref", tgt,
          "--output", str(work / "eval.txt")]
    if align is not None:
        ev += ["--align", str(align), "--spans", str(work / "train.spans"),
               "--src", str(work / "train.src"), "--buckets"]
    _run("evaluate", ev)

    try:
        src_raw, tgt_raw = load_corpus(src), load_corpus(tgt)
        sub_src = load_corpus(work / "train.src", check_reserved=False)
        sub_tgt = load_corpus(work / "train.tgt", check_reserved=False)
        spans = read_spans(work / "train.spans", [len(x) for x in sub_src])
        sv = Vocabulary.load(work / "pretrain" / "src.vocab")
        tv = Vocabulary.load(work / "pretrain" / "tgt.vocab")
        avg = load_checkpoint(work / "average.ckpt")
        model = model_from_checkpoint(avg)
        examples = [(sv.encode(a), tv.encode(b), ss) for a, b, ss in zip(sub_src, sub_tgt, spans)]
        loss = evaluate_loss(model, examples)
        hyps = [line.split() for line in read_lines(work / "hyp.txt")]
        hyp_sw = [line.split() for line in read_lines(work / "hyp.sw")]
        exact = sum(h == r for h, r in zip(hyps, tgt_raw)) / len(tgt_raw)
        covered = sum(ss.covered() for ss in spans) / sum(ss.sentence_len for ss in spans)
        bpe_src = BpeMergeTable.load(work / "src.bpe")
        wpe = WpeMergeTable.load(work / "src.wpe")
    except Exception as exc:  # noqa: BLE001 - report which stage broke
        raise StageError("report", str(exc)) from exc

    report = [
        f"pairs: {len(src_raw)}",
        f"src_bpe_merges: {len(bpe_src)}",
        f"src_wpe_merges: {len(wpe)}",
        f"src_vocab: {len(sv)}",
        f"tgt_vocab: {len(tv)}",
        f"multi_token_spans: {sum(len(ss.multi()) for ss in spans)}",
        f"span_coverage: {covered:.4f}",
        f"pretrain_checkpoints: {len(pre)}",
        f"finetune_checkpoints: {len(ft)}",
        f"loss_per_token: {loss:.6f}",
        f"exact_match: {exact:.4f}",
        f"subword_bleu: {bleu(hyp_sw, sub_tgt):.4f}",
        f"subword_chrf: {chrf(hyp_sw, sub_tgt):.4f}",
    ]
    report += [line for line in read_lines(work / "eval.txt")]
    ckpts = [str(p) for p in ft]
    report += _invariant_checks(work, src_raw, bpe_src, wpe, sub_src, spans, model, avg, ckpts)
    report.append(_check("loss_below_0.1", loss < 0.1))
    report.append(_check("exact_match_0.95", exact >= 0.95))
    report.append(_check("bleu_identity", bleu(tgt_raw, tgt_raw) == 100.0))
    report.append(_check("chrf_identity", abs(chrf(tgt_raw, tgt_raw) - 100.0) < 1e-9))
    (work / "report.txt").write_text("\n".join(report) + "\n", encoding="utf-8")
    return report
