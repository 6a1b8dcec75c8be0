"""Semantic units for machine translation: WPE phrase spans, ASF fusion, SU4MT."""

from .bpe import BpeMergeTable, apply_bpe, learn_bpe, strip_bpe
from .corpus import Vocabulary, build_vocab, count_corpus, load_corpus
from .wpe import SpanSet, WpeMergeTable, apply_wpe, extract_spans, learn_wpe, random_spans, wpe_score

__version__ = "0.1.0"

__all__ = [
    "BpeMergeTable", "SpanSet", "Vocabulary", "WpeMergeTable",
    "apply_bpe", "apply_wpe", "build_vocab", "count_corpus", "extract_spans",
    "learn_bpe", "learn_wpe", "load_corpus", "random_spans", "strip_bpe", "wpe_score",
]
