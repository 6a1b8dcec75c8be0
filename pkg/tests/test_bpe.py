import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import bpe_best_pair

from semunit.bpe import BpeMergeTable, apply_bpe, learn_bpe, strip_bpe, word_lengths
from semunit.corpus import CorpusError

words = st.text(alphabet="abcd", min_size=1, max_size=7)
sentences = st.lists(words, min_size=1, max_size=6)
corpora = st.lists(sentences, min_size=1, max_size=8)


def random_corpus(rng, n_sent=None):
    n_sent = n_sent or rng.randint(1, 50)
    return [
        ["".join(rng.choice("abcde") for _ in range(rng.randint(1, 6))) for _ in range(rng.randint(1, 6))]
        for _ in range(n_sent)
    ]


def test_single_merge_on_repeated_word():
    assert learn_bpe([["aa"]] * 5, 1).merges == (("a", "a</w>"),)


def test_single_char_words_learn_nothing():
    assert len(learn_bpe([["a", "b"], ["c"]], 10)) == 0


def test_ties_go_to_lexicographically_smaller_pair():
    # ("a", "b</w>") and ("c", "d</w>") both occur twice
    table = learn_bpe([["ab", "cd"], ["ab", "cd"]], 1)
    assert table.merges == (("a", "b</w>"),)


def test_stops_when_best_pair_is_a_hapax():
    table = learn_bpe([["abc"]], 10)
    assert len(table) == 0
    assert len(learn_bpe([["abc"]], 10, min_frequency=1)) == 2


def test_empty_corpus_is_an_error():
    with pytest.raises(CorpusError):
        learn_bpe([], 5)


def test_training_example():
    table = BpeMergeTable([("t", "r"), ("tr", "a"), ("tra", "i"), ("trai", "n"),
                           ("i", "n"), ("in", "g</w>")])
    assert apply_bpe(["training"], table) == ["train@@", "ing"]
    assert strip_bpe(["train@@", "ing"]) == ["training"]


def test_whole_word_unit_is_unmarked():
    table = BpeMergeTable([("c", "a"), ("ca", "t</w>")])
    assert apply_bpe(["cat"], table) == ["cat"]


def test_empty_table_splits_characters():
    assert apply_bpe(["abc", "d"], BpeMergeTable()) == ["a@@", "b@@", "c", "d"]


def test_unknown_characters_pass_through():
    table = learn_bpe([["ab"]] * 3, 5)
    assert apply_bpe(["xyz"], table) == ["x@@", "y@@", "z"]


def test_strip_without_marks_is_identity():
    assert strip_bpe(["a", "b"]) == ["a", "b"]


def test_strip_rejects_trailing_mark():
    with pytest.raises(ValueError):
        strip_bpe(["a", "b@@"])
    assert strip_bpe(["a", "b@@", "c@@"], strict=False) == ["a", "bc"]


def test_word_lengths():
    assert word_lengths(["train@@", "ing", "is", "fu@@", "n@@", "ny"]) == [2, 1, 3]


@settings(max_examples=200)
@given(corpora, st.integers(1, 30), sentences)
def test_round_trip(corpus, k, sentence):
    table = learn_bpe(corpus, k)
    assert strip_bpe(apply_bpe(sentence, table)) == sentence


@given(corpora, sentences)
def test_prefix_tables_never_segment_coarser(corpus, sentence):
    table = learn_bpe(corpus, 25)
    full = len(apply_bpe(sentence, table))
    for k in range(len(table) + 1):
        assert len(apply_bpe(sentence, table.prefix(k))) >= full


@given(corpora)
def test_marks_only_inside_words(corpus):
    table = learn_bpe(corpus, 20)
    for s in corpus:
        sub = apply_bpe(s, table)
        assert not sub[-1].endswith("@@")
        assert sum(not t.endswith("@@") for t in sub) == len(s)


def test_greedy_steps_match_brute_force():
    rng = random.Random(11)
    for _ in range(20):
        corpus = random_corpus(rng)
        table = learn_bpe(corpus, 40)
        for k, merge in enumerate(table.merges):
            pair, freq = bpe_best_pair(corpus, table.merges[:k])
            assert merge == pair and freq >= 2
        pair, freq = bpe_best_pair(corpus, table.merges)
        assert len(table) == 40 or pair is None or freq < 2


def test_deterministic_and_save_load(tmp_path):
    corpus = random_corpus(random.Random(3), 30)
    a, b = learn_bpe(corpus, 30), learn_bpe(corpus, 30)
    assert a == b
    a.save(tmp_path / "codes")
    assert BpeMergeTable.load(tmp_path / "codes") == a


def test_load_rejects_headerless_file(tmp_path):
    (tmp_path / "codes").write_text("a b\n")
    with pytest.raises(CorpusError, match="header"):
        BpeMergeTable.load(tmp_path / "codes")
