"""Whitespace-tokenized parallel corpora: loading, counting, vocabularies."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

CONT_MARK = "@@"
JOINER = "#$&"

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)

Sentence = list  # list[str]

_WS = re.compile(r"\s+")


class CorpusError(ValueError):
    """Raised for malformed corpus input."""


def check_token(tok: str) -> None:
    if not tok or _WS.search(tok):
        raise CorpusError(f"invalid token {tok!r}")
    if tok.endswith(CONT_MARK) or JOINER in tok:
        raise CorpusError(f"token {tok!r} collides with a reserved sign")


def check_sentence(tokens: Sequence[str]) -> None:
    if len(tokens) == 0:
        raise CorpusError("empty sentence")
    for tok in tokens:
        check_token(tok)


def read_lines(path: str | Path) -> list[str]:
    """Read a UTF-8 file as a list of lines without their terminators."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: malformed UTF-8 at byte {exc.start}") from exc
    if not text:
        return []
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    return lines


def load_corpus(path: str | Path, *, check_reserved: bool = True) -> list[list[str]]:
    """Load one sentence per line, splitting on runs of whitespace.

    Empty lines are an error and the message carries the 1-based line number.
    `check_reserved=False` is used for already-segmented text, where "@@"
    suffixes are expected.
    """
    out = []
    for lineno, line in enumerate(read_lines(path), start=1):
        tokens = line.split()
        if not tokens:
            raise CorpusError(f"{path}:{lineno}: empty line")
        if check_reserved:
            try:
                check_sentence(tokens)
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
        out.append(tokens)
    return out


def load_parallel(src_path, tgt_path) -> list[tuple[list[str], list[str]]]:
    src = load_corpus(src_path)
    tgt = load_corpus(tgt_path)
    if len(src) != len(tgt):
        raise CorpusError(
            f"parallel files differ in length: {len(src)} vs {len(tgt)} lines"
        )
    return list(zip(src, tgt))


def write_corpus(path: str | Path, sentences: Iterable[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in sentences:
            f.write(" ".join(s) + "\n")


def clean_pairs(
    pairs: Iterable[tuple[Sequence[str], Sequence[str]]],
    min_len: int = 3,
    max_len: int = 250,
    max_word_chars: int = 25,
    max_ratio: float = 2.0,
) -> list[tuple[list[str], list[str]]]:
    """Drop noisy pairs using the WMT14 En-De filtering thresholds.

    A pair is dropped if either side has fewer than `min_len` or more than
    `max_len` words, contains a word longer than `max_word_chars`, or if the
    source/target length ratio is above `max_ratio` or below its inverse.
    """
    kept = []
    for src, tgt in pairs:
        if not all(min_len <= len(s) <= max_len for s in (src, tgt)):
            continue
        if any(len(w) > max_word_chars for w in (*src, *tgt)):
            continue
        ratio = len(src) / len(tgt)
        if ratio > max_ratio or ratio < 1.0 / max_ratio:
            continue
        kept.append((list(src), list(tgt)))
    return kept


@dataclass(frozen=True)
class CountTable:
    unigram: Counter = field(default_factory=Counter)
    bigram: Counter = field(default_factory=Counter)

    def __add__(self, other: "CountTable") -> "CountTable":
        return CountTable(self.unigram + other.unigram, self.bigram + other.bigram)


def count_corpus(corpus: Sequence[Sequence[str]]) -> CountTable:
    """Unigram counts over all tokens and bigram counts within sentences."""
    if len(corpus) == 0:
        raise CorpusError("cannot count an empty corpus")
    uni: Counter = Counter()
    bi: Counter = Counter()
    for sent in corpus:
        uni.update(sent)
        bi.update(zip(sent, sent[1:]))
    return CountTable(uni, bi)


class Vocabulary:
    """Token <-> id mapping with the four specials at ids 0-3."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(SPECIALS) + list(tokens)
        self.id_of = {t: i for i, t in enumerate(self.itos)}
        if len(self.id_of) != len(self.itos):
            raise CorpusError("duplicate entries in vocabulary")

    pad_id, bos_id, eos_id, unk_id = PAD_ID, BOS_ID, EOS_ID, UNK_ID

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Sequence[str], strict: bool = False) -> list[int]:
        if strict:
            missing = [t for t in tokens if t not in self.id_of]
            if missing:
                raise KeyError(f"tokens not in vocabulary: {missing[:5]}")
        return [self.id_of.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID)]

    def save(self, path: str | Path) -> None:
        write_corpus(path, [[t] for t in self.itos[len(SPECIALS):]])

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls([line for line in read_lines(path)])


def build_vocab(corpus: Sequence[Sequence[str]]) -> Vocabulary:
    """Ids by descending frequency, ties broken lexicographically."""
    if len(corpus) == 0:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    freq = Counter(tok for sent in corpus for tok in sent)
    ordered = sorted(freq, key=lambda t: (-freq[t], t))
    return Vocabulary(ordered)
