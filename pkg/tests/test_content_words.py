import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visaid.content_words import (ContentWordList, PosLexicon,
                                  extract_content_words, load_pos_lexicon,
                                  load_stopwords)
from visaid.data import Utterance
from visaid.errors import ValidationError

LEX = PosLexicon({"going": "VERB", "holiday": "NOUN", "run": "VERB",
                  "fast": "ADV", "red": "ADJ", "thing": "NOUN"})


def utt(text):
    return Utterance.from_raw(text)


class TestExtract:
    def test_rule_application(self):
        stop = frozenset({"i", "am", "on"})
        got = extract_content_words(utt("I am going on holiday"), LEX, stop)
        assert got.words == ("going", "holiday")

    def test_all_stopwords(self):
        stop = frozenset({"i", "am"})
        assert extract_content_words(utt("i am"), LEX, stop).words == ()

    def test_duplicates_preserved(self):
        got = extract_content_words(utt("run run fast"), LEX, frozenset())
        assert got.words == ("run", "run", "fast")

    def test_unknown_token_excluded(self):
        got = extract_content_words(utt("blorp run"), LEX, frozenset())
        assert got.words == ("run",)

    def test_stopword_beats_tag(self):
        got = extract_content_words(utt("run fast"), LEX, frozenset({"run"}))
        assert got.words == ("fast",)


class TestLexiconIO:
    def test_load(self, tmp_path):
        f = tmp_path / "lex.tsv"
        f.write_text("dog\tNOUN\nrun\tVERB\n", encoding="utf-8")
        lex = load_pos_lexicon(f)
        assert lex.tag("dog") == "NOUN"

    def test_absent_token_defaults_other(self, tmp_path):
        f = tmp_path / "lex.tsv"
        f.write_text("dog\tNOUN\n", encoding="utf-8")
        assert load_pos_lexicon(f).tag("cat") == "OTHER"

    def test_unknown_tag_errors_with_line(self, tmp_path):
        f = tmp_path / "lex.tsv"
        f.write_text("dog\tNOUN\nx\tFOO\n", encoding="utf-8")
        with pytest.raises(ValidationError, match=":2:"):
            load_pos_lexicon(f)

    def test_stopword_file(self, tmp_path):
        f = tmp_path / "stop.txt"
        f.write_text("the\na\n\n", encoding="utf-8")
        assert load_stopwords(f) == frozenset({"the", "a"})


words_strategy = st.lists(
    st.sampled_from(["going", "holiday", "run", "fast", "red", "thing",
                     "the", "i", "am", "blorp"]),
    min_size=0, max_size=12)


class TestProperties:
    @given(words_strategy)
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, tokens):
        stop = frozenset({"the", "i", "am"})
        first = extract_content_words(Utterance(tuple(tokens), " ".join(tokens)), LEX, stop)
        again = extract_content_words(Utterance(first.words, " ".join(first.words)), LEX, stop)
        assert again.words == first.words

    @given(words_strategy)
    @settings(max_examples=50, deadline=None)
    def test_subsequence_of_source(self, tokens):
        got = extract_content_words(Utterance(tuple(tokens), ""), LEX, frozenset())
        it = iter(tokens)
        assert all(any(tok == w for tok in it) for w in got.words)

    @given(words_strategy, st.sets(st.sampled_from(["going", "run", "fast", "red"])))
    @settings(max_examples=50, deadline=None)
    def test_stopword_monotonicity(self, tokens, extra_stop):
        base = frozenset({"the"})
        small = extract_content_words(Utterance(tuple(tokens), ""), LEX, base)
        big = extract_content_words(Utterance(tuple(tokens), ""), LEX, base | extra_stop)
        assert len(big.words) <= len(small.words)
        assert set(big.words) <= set(small.words)


def test_content_word_list_carries_source():
    u = utt("run fast")
    got = extract_content_words(u, LEX, frozenset())
    assert isinstance(got, ContentWordList)
    assert got.source is u
