"""BLEU, chrF, span-count bucketing and alignment-based semantic-unit recall."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .corpus import CONT_MARK, CorpusError, read_lines
from .wpe import SpanSet

Link = tuple[int, int, str]  # (src index, tgt index, "S" or "P"), 0-based


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyp: Sequence[str], ref: Sequence[str], order: int = 4):
    """(matches per order, hypothesis n-grams per order, hyp length, ref length)."""
    match, total = [], []
    for n in range(1, order + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        match.append(sum((h & r).values()))
        total.append(sum(h.values()))
    return match, total, len(hyp), len(ref)


def _bleu_from_stats(match, total, hyp_len, ref_len, smooth_from: int | None = None) -> float:
    logs = []
    for n, (m, t) in enumerate(zip(match, total), start=1):
        if smooth_from is not None and n >= smooth_from:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        logs.append(math.log(m / t))
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len) if hyp_len else 0.0
    return 100.0 * bp * math.exp(sum(logs) / len(logs))


def bleu(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]], order: int = 4) -> float:
    """Corpus BLEU on the tokens as given: clipped n-gram precisions, brevity penalty."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    match, total = [0] * order, [0] * order
    hl = rl = 0
    for h, r in zip(hyps, refs):
        m, t, a, b = bleu_stats(h, r, order)
        match = [x + y for x, y in zip(match, m)]
        total = [x + y for x, y in zip(total, t)]
        hl += a
        rl += b
    return _bleu_from_stats(match, total, hl, rl)


def sentence_bleu(hyp: Sequence[str], ref: Sequence[str], order: int = 4) -> float:
    """Sentence BLEU with add-one smoothing on the n>1 precisions."""
    m, t, a, b = bleu_stats(hyp, ref, order)
    return _bleu_from_stats(m, t, a, b, smooth_from=2)


def _chars(s) -> str:
    text = s if isinstance(s, str) else " ".join(s)
    return re.sub(r"\s+", "", text)


def chrf(hyps, refs, order: int = 6, beta: float = 2.0) -> float:
    """Corpus chrF: character n-gram F-beta with whitespace removed.

    Statistics are summed over the corpus per order; precision and recall
    are averaged over the orders that have n-grams on both sides.
    Sentences may be token lists or plain strings.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    stats = [[0, 0, 0] for _ in range(order)]
    for h, r in zip(hyps, refs):
        hc, rc = _chars(h), _chars(r)
        for n in range(1, order + 1):
            hn = Counter(hc[i:i + n] for i in range(len(hc) - n + 1))
            rn = Counter(rc[i:i + n] for i in range(len(rc) - n + 1))
            st = stats[n - 1]
            st[0] += sum(hn.values())
            st[1] += sum(rn.values())
            st[2] += sum((hn & rn).values())
    prec = rec = 0.0
    eff = 0
    for h_n, r_n, common in stats:
        if h_n and r_n:
            prec += common / h_n
            rec += common / r_n
            eff += 1
    if eff == 0:
        return 0.0
    prec, rec = prec / eff, rec / eff
    if prec + rec == 0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * prec * rec / (b2 * prec + rec)


def parse_alignment_line(line: str) -> set[Link]:
    """Parse 1-based 'i-j' (sure) and 'i?j' (possible) links."""
    links = set()
    for item in line.split():
        m = re.fullmatch(r"(\d+)([-?])(\d+)", item)
        if not m:
            raise CorpusError(f"malformed alignment link {item!r}")
        i, j = int(m.group(1)), int(m.group(3))
        if i < 1 or j < 1:
            raise CorpusError(f"alignment indices are 1-based: {item!r}")
        links.add((i - 1, j - 1, "S" if m.group(2) == "-" else "P"))
    sure = {(i, j) for i, j, lab in links if lab == "S"}
    # a link listed both ways counts as sure
    return {(i, j, lab) for i, j, lab in links if lab == "S" or (i, j) not in sure}


def load_alignments(path: str | Path) -> list[set[Link]]:
    out = []
    for lineno, line in enumerate(read_lines(path), start=1):
        try:
            out.append(parse_alignment_line(line))
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return out


def format_alignment_line(links: set[Link]) -> str:
    return " ".join(
        f"{i + 1}{'-' if lab == 'S' else '?'}{j + 1}" for i, j, lab in sorted(links)
    )


def unit_words(spans: SpanSet, src_subwords: Sequence[str] | None = None) -> set[int]:
    """Source word indices touched by a multi-token span.

    Spans index subwords; `src_subwords` maps them back to words through the
    continuation marks. Without it, spans are taken to index words directly.
    """
    if src_subwords is None:
        word_of = list(range(spans.sentence_len))
    else:
        if len(src_subwords) != spans.sentence_len:
            raise ValueError("spans do not match the source subword sentence")
        word_of, w = [], 0
        for sw in src_subwords:
            word_of.append(w)
            if not sw.endswith(CONT_MARK):
                w += 1
    return {word_of[k] for a, b in spans.multi() for k in range(a, b)}


@dataclass
class RecallCounts:
    matched: int
    total: int

    @property
    def recall(self) -> float | None:
        return self.matched / self.total if self.total else None


def semantic_recall_counts(
    hyps: Sequence[Sequence[str]],
    refs: Sequence[Sequence[str]],
    alignments: Sequence[set[Link]],
    spans: Sequence[SpanSet],
    mode: str = "S",
    src_subwords: Sequence[Sequence[str]] | None = None,
) -> RecallCounts:
    if mode not in ("S", "S+P"):
        raise ValueError("mode must be 'S' or 'S+P'")
    n = len(refs)
    if len(hyps) != n or len(spans) != n:
        raise ValueError("hypotheses, references and spans must align")
    if len(alignments) != n:
        raise ValueError(f"{len(alignments)} alignment lines for {n} sentence pairs")
    if src_subwords is not None and len(src_subwords) != n:
        raise ValueError("source subword sentences must align with references")
    labels = {"S"} if mode == "S" else {"S", "P"}
    matched = total = 0
    for k in range(n):
        words = unit_words(spans[k], None if src_subwords is None else src_subwords[k])
        ref = refs[k]
        tgt_idx = set()
        for i, j, lab in alignments[k]:
            if j >= len(ref):
                raise ValueError(f"pair {k}: target index {j + 1} beyond reference length")
            if lab in labels and i in words:
                tgt_idx.add(j)
        wanted = Counter(ref[j] for j in tgt_idx)
        have = Counter(hyps[k])
        matched += sum(min(c, have[w]) for w, c in wanted.items())
        total += sum(wanted.values())
    return RecallCounts(matched, total)


def semantic_recall(hyps, refs, alignments, spans, mode="S", src_subwords=None) -> float | None:
    """Recall of reference words aligned to source words inside multi-token spans.

    Each collected reference word counts as recovered if the hypothesis holds
    it (count-clipped). Returns None when the corpus has no such words.
    """
    return semantic_recall_counts(hyps, refs, alignments, spans, mode, src_subwords).recall


BUCKETS = ("0", "1", "2", "3", "4+")


@dataclass
class BucketReport:
    counts: dict[str, int]
    means: dict[str, float | None]

    def lines(self, name: str = "metric") -> list[str]:
        out = []
        for b in BUCKETS:
            m = self.means[b]
            out.append(f"bucket_{b}_count: {self.counts[b]}")
            out.append(f"bucket_{b}_{name}: {'nan' if m is None else f'{m:.4f}'}")
        return out


def bucket_by_span_count(values: Sequence[float], spans: Sequence[SpanSet]) -> BucketReport:
    """Group sentences by their multi-token span count: 0, 1, 2, 3, 4 or more."""
    if len(values) != len(spans):
        raise ValueError("values and spans must align")
    groups: dict[str, list[float]] = {b: [] for b in BUCKETS}
    for v, ss in zip(values, spans):
        groups[BUCKETS[min(len(ss.multi()), 4)]].append(v)
    return BucketReport(
        {b: len(g) for b, g in groups.items()},
        {b: (sum(g) / len(g) if g else None) for b, g in groups.items()},
    )
