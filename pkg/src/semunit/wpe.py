"""Word Pair Encoding phrases and semantic-unit spans over subword sentences."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .bpe import BpeMergeTable, apply_bpe
from .corpus import JOINER, CorpusError, count_corpus, read_lines

logger = logging.getLogger(__name__)

WPE_HEADER = "#version: semunit-wpe 1"
DEFAULT_DELTA = 100.0
DEFAULT_MERGES = 10_000
MAX_SPAN = 6

Pair = tuple[str, str]


def wpe_score(pair_count: int, c1: int, c2: int, delta: float) -> float:
    """Normalized co-occurrence score; negative means the pair is never merged."""
    return (pair_count - delta) / math.sqrt(c1 * c2)


class WpeMergeTable:
    def __init__(self, merges: Sequence[Pair] = (), delta: float = DEFAULT_DELTA):
        self.merges: tuple[Pair, ...] = tuple((str(a), str(b)) for a, b in merges)
        self.delta = float(delta)
        self.ranks = {m: i for i, m in enumerate(self.merges)}
        if len(self.ranks) != len(self.merges):
            raise ValueError("duplicate merge in WPE table")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")

    def __len__(self) -> int:
        return len(self.merges)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, WpeMergeTable)
            and self.merges == other.merges
            and self.delta == other.delta
        )

    def __repr__(self) -> str:
        return f"WpeMergeTable({len(self)} merges, delta={self.delta:g})"

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(WPE_HEADER + "\n")
            f.write(f"#delta: {self.delta!r}\n")
            for a, b in self.merges:
                f.write(f"{a} {b}\n")

    @classmethod
    def load(cls, path: str | Path) -> "WpeMergeTable":
        lines = read_lines(path)
        if len(lines) < 2 or lines[0] != WPE_HEADER or not lines[1].startswith("#delta: "):
            raise CorpusError(f"{path}: missing WPE header")
        try:
            delta = float(lines[1][len("#delta: "):])
        except ValueError:
            raise CorpusError(f"{path}:2: malformed delta") from None
        merges = []
        for lineno, line in enumerate(lines[2:], start=3):
            parts = line.split(" ")
            if len(parts) != 2 or not all(parts):
                raise CorpusError(f"{path}:{lineno}: malformed merge line")
            merges.append((parts[0], parts[1]))
        return cls(merges, delta)


def _merge_seq(units: Sequence[str], pair: Pair) -> list[str]:
    left, right = pair
    out = []
    i = 0
    n = len(units)
    while i < n:
        if i + 1 < n and units[i] == left and units[i + 1] == right:
            out.append(left + JOINER + right)
            i += 2
        else:
            out.append(units[i])
            i += 1
    return out


def best_wpe_pair(sentences: Sequence[Sequence[str]], delta: float):
    """Highest-scoring adjacent pair as (pair, score), or (None, -inf).

    Ties on score go to the pair seen more often, then to the
    lexicographically smaller (left, right).
    """
    counts = count_corpus(sentences)
    uni = counts.unigram
    best, best_key = None, None
    for pair, n in counts.bigram.items():
        s = wpe_score(n, uni[pair[0]], uni[pair[1]], delta)
        key = (-s, -n, pair)
        if best_key is None or key < best_key:
            best, best_key = pair, key
    if best is None:
        return None, -math.inf
    return best, -best_key[0]


def learn_wpe(
    corpus: Sequence[Sequence[str]],
    num_merges: int = DEFAULT_MERGES,
    delta: float = DEFAULT_DELTA,
) -> WpeMergeTable:
    """Greedy phrase learning, recounting all unit statistics after each merge.

    Stops early once no adjacent pair scores above zero.
    """
    if len(corpus) == 0:
        raise CorpusError("cannot learn WPE from an empty corpus")
    if num_merges < 1:
        raise ValueError("num_merges must be >= 1")
    sents = [list(s) for s in corpus]
    merges: list[Pair] = []
    while len(merges) < num_merges:
        pair, score = best_wpe_pair(sents, delta)
        if pair is None or score <= 0:
            break
        merges.append(pair)
        sents = [_merge_seq(s, pair) if len(s) > 1 else s for s in sents]
    logger.info("learned %d WPE merges (delta=%g)", len(merges), delta)
    return WpeMergeTable(merges, delta)


def apply_wpe(sentence: Sequence[str], table: WpeMergeTable) -> list[str]:
    """Apply phrase merges by priority; merged phrases are joined with '#$&'."""
    units = list(sentence)
    ranks = table.ranks
    while len(units) > 1:
        best, best_rank = None, len(ranks)
        for p in zip(units, units[1:]):
            r = ranks.get(p)
            if r is not None and r < best_rank:
                best, best_rank = p, r
        if best is None:
            break
        units = _merge_seq(units, best)
    return units


@dataclass(frozen=True)
class SpanSet:
    """A partition of [0, sentence_len) into contiguous half-open spans."""

    spans: tuple[tuple[int, int], ...]
    sentence_len: int

    def __post_init__(self):
        object.__setattr__(self, "spans", tuple((int(a), int(b)) for a, b in self.spans))
        pos = 0
        for a, b in self.spans:
            if a != pos or b <= a:
                raise ValueError(f"spans {self.spans} are not a partition of {self.sentence_len}")
            pos = b
        if pos != self.sentence_len:
            raise ValueError(f"spans {self.spans} do not cover {self.sentence_len} tokens")

    def __len__(self) -> int:
        return len(self.spans)

    @classmethod
    def singletons(cls, n: int) -> "SpanSet":
        return cls(tuple((i, i + 1) for i in range(n)), n)

    @classmethod
    def from_multi(cls, multi: Iterable[tuple[int, int]], n: int) -> "SpanSet":
        """Build from only the multi-token spans; gaps become singletons."""
        spans = []
        pos = 0
        for a, b in sorted(multi):
            if a < pos:
                raise ValueError("overlapping spans")
            spans.extend((i, i + 1) for i in range(pos, a))
            spans.append((a, b))
            pos = b
        spans.extend((i, i + 1) for i in range(pos, n))
        return cls(tuple(spans), n)

    def multi(self) -> list[tuple[int, int]]:
        return [(a, b) for a, b in self.spans if b - a > 1]

    def max_len(self) -> int:
        return max((b - a for a, b in self.spans), default=0)

    def covered(self) -> int:
        """Tokens inside multi-token spans."""
        return sum(b - a for a, b in self.multi())


def _word_units(offsets, lengths, lo, hi, max_span, word_units):
    # spans for words lo..hi-1 treated individually
    out = []
    for w in range(lo, hi):
        start, n = offsets[w], lengths[w]
        if word_units and 1 < n <= max_span:
            out.append((start, start + n))
        else:
            out.extend((i, i + 1) for i in range(start, start + n))
    return out


def extract_spans(
    sentence: Sequence[str],
    wpe: WpeMergeTable,
    bpe: BpeMergeTable,
    max_span: int = MAX_SPAN,
    word_units: bool = True,
) -> tuple[list[str], SpanSet]:
    """Segment `sentence` with BPE and locate its semantic units.

    WPE decides which words group into phrases; the returned subwords are
    exactly ``apply_bpe(sentence, bpe)``. A phrase becomes one span over all
    its subwords, a multi-subword word outside a phrase becomes one span
    (unless `word_units` is False), and everything else is a singleton.
    Spans longer than `max_span` fall back to their word-level units, and
    a single word longer than `max_span` falls back to singletons.
    """
    if max_span < 1:
        raise ValueError("max_span must be >= 1")
    subwords = apply_bpe(sentence, bpe)
    lengths = [len(bpe.segment_word(w)) for w in sentence]
    offsets = [0]
    for n in lengths:
        offsets.append(offsets[-1] + n)

    spans = []
    w = 0
    for unit in apply_wpe(sentence, wpe):
        n_words = unit.count(JOINER) + 1
        lo, hi = w, w + n_words
        size = offsets[hi] - offsets[lo]
        if n_words > 1 and size <= max_span:
            spans.append((offsets[lo], offsets[hi]))
        else:
            spans.extend(_word_units(offsets, lengths, lo, hi, max_span, word_units))
        w = hi
    assert w == len(sentence)
    return subwords, SpanSet(tuple(spans), len(subwords))


def random_spans(
    sentence_len: int,
    target_ratio: float,
    seed: int,
    min_len: int = 2,
    max_len: int = MAX_SPAN,
) -> SpanSet:
    """Random multi-token spans covering about `target_ratio` of the tokens.

    Spans are placed one at a time: a length is drawn uniformly from the
    lengths that still fit somewhere, then a start uniformly from the free
    positions that fit it. Placement stops as soon as the covered fraction
    reaches the target or no gap of `min_len` tokens is left.
    """
    if not 0.0 <= target_ratio <= 1.0:
        raise ValueError("target_ratio must be in [0, 1]")
    rng = random.Random(seed)
    free = [True] * sentence_len
    chosen = []
    covered = 0
    while sentence_len and covered / sentence_len < target_ratio:
        # run length of free cells starting at each position
        run = [0] * (sentence_len + 1)
        for i in range(sentence_len - 1, -1, -1):
            run[i] = run[i + 1] + 1 if free[i] else 0
        longest = max(run)
        if longest < min_len:
            break
        length = rng.randint(min_len, min(max_len, longest))
        starts = [i for i in range(sentence_len) if run[i] >= length]
        start = rng.choice(starts)
        for i in range(start, start + length):
            free[i] = False
        chosen.append((start, start + length))
        covered += length
    return SpanSet.from_multi(chosen, sentence_len)


def write_spans(path: str | Path, spansets: Iterable[SpanSet]) -> None:
    """One line per sentence listing multi-token spans as 'start-end'."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ss in spansets:
            f.write(" ".join(f"{a}-{b}" for a, b in ss.multi()) + "\n")


def read_spans(path: str | Path, lengths: Sequence[int]) -> list[SpanSet]:
    lines = read_lines(path)
    if len(lines) != len(lengths):
        raise CorpusError(
            f"{path}: {len(lines)} span lines for {len(lengths)} sentences"
        )
    out = []
    for lineno, (line, n) in enumerate(zip(lines, lengths), start=1):
        multi = []
        for item in line.split():
            try:
                a, b = item.split("-")
                multi.append((int(a), int(b)))
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: malformed span {item!r}") from None
        try:
            out.append(SpanSet.from_multi(multi, n))
        except ValueError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return out
