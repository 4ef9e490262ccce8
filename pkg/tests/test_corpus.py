import string
from datetime import date

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsignal import corpus
from qsignal.corpus import (
    DuplicateCallIdError,
    EmptyTranscriptError,
    MaskRules,
    MissingFieldError,
    SentimentLexicon,
    TextChunk,
    Transcript,
    UnparseableDateError,
    chunk,
    ingest_transcripts,
    lemmatize,
    lm_sentiment,
    load_lexicon,
    mask_identity,
    tokenize,
    top_bigrams,
)


def make_transcript(text, call_id="c1"):
    return Transcript(
        call_id=call_id,
        ticker="ACME",
        fiscal_quarter="2020Q1",
        call_date=date(2020, 2, 1),
        text=text,
    )


def record(**overrides):
    rec = {
        "call_id": "c1",
        "ticker": "ACME",
        "fiscal_quarter": "2020Q1",
        "call_date": "2020-02-01",
        "text": "hello world",
    }
    rec.update(overrides)
    return rec


class TestIngest:
    def test_valid_record(self):
        (t,) = ingest_transcripts([record()])
        assert t.call_id == "c1"
        assert t.call_date == date(2020, 2, 1)

    def test_missing_field(self):
        with pytest.raises(MissingFieldError) as exc:
            ingest_transcripts([record(), record(text="")])
        assert exc.value.record_index == 1
        assert exc.value.field == "text"

    def test_bad_date(self):
        with pytest.raises(UnparseableDateError):
            ingest_transcripts([record(call_date="02/01/2020x")])

    def test_duplicate_reject(self):
        with pytest.raises(DuplicateCallIdError):
            ingest_transcripts([record(), record()])

    def test_duplicate_first_last(self):
        recs = [record(text="first words"), record(text="last words")]
        (kept,) = ingest_transcripts(recs, on_duplicate="first")
        assert kept.text == "first words"
        (kept,) = ingest_transcripts(recs, on_duplicate="last")
        assert kept.text == "last words"

    def test_bad_quarter_label(self):
        with pytest.raises(ValueError):
            ingest_transcripts([record(fiscal_quarter="2020Q5")])

    def test_date_out_of_range(self):
        with pytest.raises(ValueError):
            ingest_transcripts([record(call_date="1850-01-01")])


class TestChunk:
    def test_short_text_single_chunk(self):
        chunks = chunk(make_transcript("a b c"), max_words=10)
        assert len(chunks) == 1
        assert chunks[0].text == "a b c"
        assert chunks[0].word_count == 3

    def test_exact_boundary(self):
        t = make_transcript(" ".join(f"w{i}" for i in range(10)))
        chunks = chunk(t, max_words=5)
        assert [c.word_count for c in chunks] == [5, 5]
        assert [c.chunk_index for c in chunks] == [0, 1]

    def test_round_trip(self):
        t = make_transcript(" ".join(f"w{i}" for i in range(23)))
        chunks = chunk(t, max_words=5)
        assert " ".join(c.text for c in chunks).split() == t.text.split()

    def test_empty_raises(self):
        with pytest.raises(EmptyTranscriptError):
            chunk(make_transcript("   "))

    @given(
        n_words=st.integers(min_value=1, max_value=400),
        max_words=st.integers(min_value=1, max_value=50),
    )
    @settings(max_examples=60, deadline=None)
    def test_round_trip_and_bound_property(self, n_words, max_words):
        t = make_transcript(" ".join(f"w{i}" for i in range(n_words)))
        chunks = chunk(t, max_words=max_words)
        assert all(c.word_count <= max_words for c in chunks)
        assert all(c.word_count == len(c.text.split()) for c in chunks)
        assert " ".join(c.text for c in chunks).split() == t.text.split()


def oracle_mask(text, rules):
    """Independent token-by-token rule application (single-space texts only)."""
    out = []
    for tok in text.split():
        core = tok.strip(string.punctuation)
        hit = False
        if core:
            low = core.lower()
            if low in rules.month_lexicon or low in rules.entity_lexicon:
                hit = True
            elif core.isdigit() and len(core) == 4 and rules.year_min <= int(core) <= rules.year_max:
                hit = True
        if hit:
            i = tok.index(core)
            tok = tok[:i] + rules.mask_token + tok[i + len(core):]
        out.append(tok)
    return " ".join(out)


class TestMask:
    rules = MaskRules(entity_lexicon=frozenset({"acme", "globex"}))

    def mask_text(self, text):
        c = TextChunk("c1", 0, text, len(text.split()))
        return mask_identity(c, self.rules).text

    def test_example(self):
        assert self.mask_text("In March 2015, Acme said") == "In ### ###, ### said"

    def test_year_range_edges(self):
        assert self.mask_text("1899 1900 2099 2100") == "1899 ### ### 2100"

    def test_punctuation_preserved(self):
        assert self.mask_text("(Acme, 2020).") == "(###, ###)."

    def test_non_year_numbers_untouched(self):
        assert self.mask_text("sales of 12345 and 123 and 20.15") == "sales of 12345 and 123 and 20.15"

    def test_idempotent(self):
        once = self.mask_text("January 2001 Globex results")
        assert self.mask_text(once) == once

    def test_token_count_preserved(self):
        text = "Acme reported May 1999 results, up 5% from 1998."
        assert len(self.mask_text(text).split()) == len(text.split())

    def test_matches_oracle_on_fixtures(self, rng):
        vocab = [
            "acme", "Globex", "revenue", "grew", "March", "sept", "May", "maybe",
            "1899", "1900", "1999", "2099", "2100", "12345", "q4,", "(2001)",
            "Acme's", "growth.", "5%", "margin", "x1999", "19999",
        ]
        texts = [
            " ".join(rng.choice(vocab, size=rng.integers(5, 40)))
            for _ in range(100)
        ]
        for text in texts:
            assert self.mask_text(text) == oracle_mask(text, self.rules)

    @given(st.lists(st.sampled_from(
        ["acme", "march", "2001", "1899", "cash", "flow.", "(May)", "x", "42"]),
        min_size=1, max_size=30))
    @settings(max_examples=60, deadline=None)
    def test_idempotence_property(self, words):
        text = " ".join(words)
        once = self.mask_text(text)
        assert self.mask_text(once) == once
        assert len(once.split()) == len(text.split())


class TestSentiment:
    lex = SentimentLexicon(
        positive=frozenset({"strong", "growth", "record"}),
        negative=frozenset({"weak", "decline", "loss"}),
    )

    def test_basic_ratio(self):
        assert lm_sentiment("strong growth despite a loss", self.lex) == pytest.approx(1 / 3)

    def test_no_hits_is_zero(self):
        assert lm_sentiment("nothing relevant here", self.lex) == 0.0

    def test_case_and_punctuation(self):
        assert lm_sentiment("Strong! Growth.", self.lex) == 1.0

    def test_overlapping_lexicons_rejected(self):
        with pytest.raises(ValueError):
            SentimentLexicon(positive=frozenset({"up"}), negative=frozenset({"UP"}))

    def test_empty_lexicon_rejected(self):
        with pytest.raises(ValueError):
            lm_sentiment("x", SentimentLexicon(frozenset(), frozenset()))

    @given(st.lists(st.sampled_from(["strong", "weak", "flat", "growth", "loss"]),
                    min_size=0, max_size=40))
    @settings(max_examples=80, deadline=None)
    def test_bounds_and_antisymmetry(self, words):
        text = " ".join(words)
        val = lm_sentiment(text, self.lex)
        assert -1.0 <= val <= 1.0
        flipped = SentimentLexicon(positive=self.lex.negative, negative=self.lex.positive)
        assert lm_sentiment(text, flipped) == pytest.approx(-val)


def oracle_bigrams(texts, k, stopwords, time_words):
    """Brute-force bigram counter over token pairs."""
    excluded = {w.lower() for w in stopwords} | {w.lower() for w in time_words}
    counts = {}
    for text in texts:
        toks = [t.lower() for t in tokenize(text)]
        for i in range(len(toks) - 1):
            a, b = toks[i], toks[i + 1]
            if a in excluded or b in excluded:
                continue
            key = f"{lemmatize(a)} {lemmatize(b)}"
            counts[key] = counts.get(key, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]


class TestBigrams:
    def test_lemmatize_rules(self):
        assert lemmatize("companies") == "company"
        assert lemmatize("losses") == "loss"
        assert lemmatize("growing") == "grow"
        assert lemmatize("increased") == "increas"
        assert lemmatize("margins") == "margin"
        assert lemmatize("is") == "is"  # stem too short, left alone

    def test_counts_and_stopwords(self):
        texts = ["the cash flow grew", "cash flows grew again", "the the the"]
        top = top_bigrams(texts, k=5)
        assert top[0] == ("cash flow", 2)
        assert all("the" not in bg.split() for bg, _ in top)

    def test_tie_break_lexicographic(self):
        top = top_bigrams(["alpha beta", "gamma delta"], k=2)
        assert top == [("alpha beta", 1), ("gamma delta", 1)]

    def test_time_words_excluded(self):
        top = top_bigrams(["fiscal quarter results improved"], k=10)
        assert all("fiscal" not in bg and "quarter" not in bg for bg, _ in top)

    def test_matches_brute_force_oracle(self, rng):
        vocab = ["cash", "flow", "margin", "growth", "the", "and", "year",
                 "companies", "company", "strong", "demand", "pricing", "q1"]
        texts = [
            " ".join(rng.choice(vocab, size=rng.integers(2, 40)))
            for _ in range(25)
        ]
        assert sum(len(t.split()) for t in texts) <= 1000
        got = top_bigrams(texts, k=25)
        want = oracle_bigrams(texts, 25, corpus.DEFAULT_STOPWORDS, corpus.DEFAULT_TIME_WORDS)
        assert got == want


def test_load_lexicon(tmp_path):
    p = tmp_path / "lex.txt"
    p.write_text("Alpha\n# a comment\nbeta  # trailing\n\nGAMMA\n")
    assert load_lexicon(p) == frozenset({"alpha", "beta", "gamma"})


def test_tokenize_strips_punctuation():
    assert tokenize("Hello, world! (really) --- 5%") == ["Hello", "world", "really", "5"]
