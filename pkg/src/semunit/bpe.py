"""Byte Pair Encoding over whitespace-tokenized text with "@@" continuation marks."""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from pathlib import Path
from typing import Sequence

from .corpus import CONT_MARK, CorpusError, read_lines

logger = logging.getLogger(__name__)

EOW = "</w>"
BPE_HEADER = "#version: semunit-bpe 1"

Pair = tuple[str, str]


def initial_units(word: str) -> tuple[str, ...]:
    """Characters of `word`, the last one carrying the end-of-word sentinel."""
    return tuple(word[:-1]) + (word[-1] + EOW,)


def merge_units(units: Sequence[str], pair: Pair) -> tuple[str, ...]:
    left, right = pair
    out = []
    i = 0
    n = len(units)
    while i < n:
        if i + 1 < n and units[i] == left and units[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(units[i])
            i += 1
    return tuple(out)


class BpeMergeTable:
    """Ordered merge rules; a rule's priority is its index."""

    def __init__(self, merges: Sequence[Pair] = ()):
        self.merges: tuple[Pair, ...] = tuple((str(a), str(b)) for a, b in merges)
        self.ranks = {m: i for i, m in enumerate(self.merges)}
        if len(self.ranks) != len(self.merges):
            raise ValueError("duplicate merge in BPE table")
        self._cache: dict[str, tuple[str, ...]] = {}

    def __len__(self) -> int:
        return len(self.merges)

    def __eq__(self, other) -> bool:
        return isinstance(other, BpeMergeTable) and self.merges == other.merges

    def __repr__(self) -> str:
        return f"BpeMergeTable({len(self)} merges)"

    def prefix(self, k: int) -> "BpeMergeTable":
        return BpeMergeTable(self.merges[:k])

    def segment_word(self, word: str) -> tuple[str, ...]:
        """Split one word into subwords (no continuation marks)."""
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        units = initial_units(word)
        ranks = self.ranks
        while len(units) > 1:
            best = None
            best_rank = len(ranks)
            for p in zip(units, units[1:]):
                r = ranks.get(p)
                if r is not None and r < best_rank:
                    best, best_rank = p, r
            if best is None:
                break
            units = merge_units(units, best)
        pieces = units[:-1] + (units[-1][: -len(EOW)],)
        self._cache[word] = pieces
        return pieces

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(BPE_HEADER + "\n")
            for a, b in self.merges:
                f.write(f"{a} {b}\n")

    @classmethod
    def load(cls, path: str | Path) -> "BpeMergeTable":
        lines = read_lines(path)
        if not lines or lines[0] != BPE_HEADER:
            raise CorpusError(f"{path}: missing header {BPE_HEADER!r}")
        merges = []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split(" ")
            if len(parts) != 2 or not all(parts):
                raise CorpusError(f"{path}:{lineno}: malformed merge line")
            merges.append((parts[0], parts[1]))
        return cls(merges)


def _best_pair(pair_freq: dict[Pair, int]) -> Pair | None:
    # highest frequency, then lexicographically smallest (left, right)
    best = None
    best_f = 0
    for p, f in pair_freq.items():
        if f > best_f or (f == best_f and best is not None and p < best):
            best, best_f = p, f
    return best


def learn_bpe(
    corpus: Sequence[Sequence[str]], num_merges: int, min_frequency: int = 2
) -> BpeMergeTable:
    """Greedily learn up to `num_merges` merges from word-frequency-weighted pairs.

    Pair statistics are updated incrementally: after each merge only the
    words containing the merged pair are recounted. Learning stops early once
    the best pair occurs fewer than `min_frequency` times.
    """
    if len(corpus) == 0:
        raise CorpusError("cannot learn BPE from an empty corpus")
    if num_merges < 1:
        raise ValueError("num_merges must be >= 1")

    word_freq = Counter(w for sent in corpus for w in sent)
    words = [initial_units(w) for w in sorted(word_freq)]
    freqs = [word_freq[w] for w in sorted(word_freq)]

    pair_freq: dict[Pair, int] = defaultdict(int)
    where: dict[Pair, set[int]] = defaultdict(set)
    for i, units in enumerate(words):
        for p in zip(units, units[1:]):
            pair_freq[p] += freqs[i]
            where[p].add(i)

    merges: list[Pair] = []
    while len(merges) < num_merges:
        best = _best_pair(pair_freq)
        if best is None or pair_freq[best] < min_frequency:
            break
        merges.append(best)
        touched = set()
        for i in sorted(where.pop(best)):
            old = words[i]
            new = merge_units(old, best)
            f = freqs[i]
            for p in zip(old, old[1:]):
                pair_freq[p] -= f
                touched.add(p)
            for p in zip(new, new[1:]):
                pair_freq[p] += f
                where[p].add(i)
            words[i] = new
        for p in touched:
            if pair_freq.get(p) == 0:
                del pair_freq[p]
                where.pop(p, None)
    logger.info("learned %d BPE merges", len(merges))
    return BpeMergeTable(merges)


def apply_bpe(sentence: Sequence[str], table: BpeMergeTable) -> list[str]:
    """Segment each word; every subword that does not end a word gets "@@"."""
    out = []
    for word in sentence:
        pieces = table.segment_word(word)
        out.extend(p + CONT_MARK for p in pieces[:-1])
        out.append(pieces[-1])
    return out


def word_lengths(subwords: Sequence[str]) -> list[int]:
    """Number of subwords in each word of a segmented sentence."""
    lengths = []
    run = 0
    for sw in subwords:
        run += 1
        if not sw.endswith(CONT_MARK):
            lengths.append(run)
            run = 0
    if run:
        raise ValueError("segmented sentence ends with a continuation mark")
    return lengths


def strip_bpe(subwords: Sequence[str], strict: bool = True) -> list[str]:
    """Undo `apply_bpe`: glue marked subwords to their successors.

    A trailing continuation mark is an error unless `strict` is False, in
    which case the dangling pieces close the last word (decoder output can
    stop mid-word).
    """
    words = []
    buf = []
    for sw in subwords:
        if sw.endswith(CONT_MARK):
            buf.append(sw[: -len(CONT_MARK)])
        else:
            buf.append(sw)
            words.append("".join(buf))
            buf = []
    if buf:
        if strict:
            raise ValueError("segmented sentence ends with a continuation mark")
        words.append("".join(buf))
    return words
