"""Transcript ingestion, chunking, identity masking, sentiment, and bigrams.

Everything in this module is a pure function over immutable inputs, so
operations can be mapped over transcripts in parallel without shared state.
Tokenization is uniform across the module: split on whitespace, strip
leading/trailing punctuation from each token.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import date, datetime
from typing import Iterable, Iterator, Sequence

__all__ = [
    "Transcript",
    "TextChunk",
    "MaskRules",
    "SentimentLexicon",
    "CorpusError",
    "MissingFieldError",
    "DuplicateCallIdError",
    "UnparseableDateError",
    "EmptyTranscriptError",
    "tokenize",
    "ingest_transcripts",
    "read_transcripts_jsonl",
    "chunk",
    "mask_identity",
    "lm_sentiment",
    "top_bigrams",
    "lemmatize",
    "load_lexicon",
    "DEFAULT_STOPWORDS",
    "DEFAULT_TIME_WORDS",
    "MONTH_WORDS",
]


class CorpusError(Exception):
    """Base class for corpus-stage errors."""


class MissingFieldError(CorpusError):
    def __init__(self, record_index: int, fld: str):
        self.record_index = record_index
        self.field = fld
        super().__init__(f"record {record_index}: missing field {fld!r}")


class DuplicateCallIdError(CorpusError):
    def __init__(self, call_id: str):
        self.call_id = call_id
        super().__init__(f"duplicate call_id {call_id!r}")


class UnparseableDateError(CorpusError):
    def __init__(self, record_index: int, value: str):
        self.record_index = record_index
        self.value = value
        super().__init__(f"record {record_index}: unparseable call_date {value!r}")


class EmptyTranscriptError(CorpusError):
    pass


_QUARTER_RE = re.compile(r"^(\d{4})Q([1-4])$")
_PUNCT = string.punctuation


@dataclass(frozen=True)
class Transcript:
    """One earnings call: identity plus full text."""

    call_id: str
    ticker: str
    fiscal_quarter: str  # "YYYYQn"
    call_date: date
    text: str

    def __post_init__(self):
        if not self.text:
            raise EmptyTranscriptError(f"transcript {self.call_id!r} has empty text")
        if not _QUARTER_RE.match(self.fiscal_quarter):
            raise ValueError(f"bad fiscal_quarter {self.fiscal_quarter!r}, want 'YYYYQn'")
        if not 1900 <= self.call_date.year <= 2099:
            raise ValueError(f"call_date {self.call_date} outside 1900-2099")


@dataclass(frozen=True)
class TextChunk:
    """A word-bounded segment of a transcript, sized for one provider query."""

    call_id: str
    chunk_index: int
    text: str
    word_count: int


def tokenize(text: str) -> list[str]:
    """Whitespace tokens with leading/trailing punctuation stripped.

    Tokens that are pure punctuation vanish.
    """
    out = []
    for tok in text.split():
        core = tok.strip(_PUNCT)
        if core:
            out.append(core)
    return out


def ingest_transcripts(
    records: Iterable[dict],
    on_duplicate: str = "reject",
) -> list[Transcript]:
    """Validate raw records into Transcripts.

    ``on_duplicate`` is one of "reject" (raise), "first" (keep first), or
    "last" (keep last occurrence of a call_id).
    """
    if on_duplicate not in ("reject", "first", "last"):
        raise ValueError(f"bad on_duplicate {on_duplicate!r}")
    required = ("call_id", "ticker", "fiscal_quarter", "call_date", "text")
    by_id: dict[str, Transcript] = {}
    for i, rec in enumerate(records):
        for fld in required:
            if fld not in rec or rec[fld] in (None, ""):
                raise MissingFieldError(i, fld)
        raw_date = rec["call_date"]
        if isinstance(raw_date, date):
            parsed = raw_date
        else:
            try:
                parsed = datetime.fromisoformat(str(raw_date)).date()
            except ValueError:
                raise UnparseableDateError(i, str(raw_date)) from None
        t = Transcript(
            call_id=str(rec["call_id"]),
            ticker=str(rec["ticker"]),
            fiscal_quarter=str(rec["fiscal_quarter"]),
            call_date=parsed,
            text=str(rec["text"]),
        )
        if t.call_id in by_id:
            if on_duplicate == "reject":
                raise DuplicateCallIdError(t.call_id)
            if on_duplicate == "first":
                continue
        by_id[t.call_id] = t
    return list(by_id.values())


def read_transcripts_jsonl(path, on_duplicate: str = "reject") -> list[Transcript]:
    """Load line-delimited JSON transcripts (one object per call)."""
    with open(path, encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    return ingest_transcripts(records, on_duplicate=on_duplicate)


def chunk(t: Transcript, max_words: int = 2500) -> list[TextChunk]:
    """Split a transcript into consecutive chunks of at most ``max_words`` words.

    Greedy fill on whitespace-delimited words; no word is split, and joining
    the chunks with single spaces reproduces the transcript's word sequence.
    """
    if max_words < 1:
        raise ValueError("max_words must be >= 1")
    words = t.text.split()
    if not words:
        raise EmptyTranscriptError(f"transcript {t.call_id!r} has no words")
    chunks = []
    for i, start in enumerate(range(0, len(words), max_words)):
        piece = words[start : start + max_words]
        chunks.append(
            TextChunk(call_id=t.call_id, chunk_index=i, text=" ".join(piece), word_count=len(piece))
        )
    return chunks


MONTH_WORDS = frozenset(
    [
        "january", "february", "march", "april", "may", "june", "july",
        "august", "september", "october", "november", "december",
        "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep", "sept",
        "oct", "nov", "dec",
    ]
)


@dataclass(frozen=True)
class MaskRules:
    """What to redact: years in a range, month names, and a supplied entity list.

    The entity lexicon slot accepts out-of-band NER output; matching is
    case-insensitive and whole-token.
    """

    year_min: int = 1900
    year_max: int = 2099
    month_lexicon: frozenset[str] = MONTH_WORDS
    entity_lexicon: frozenset[str] = frozenset()
    mask_token: str = "###"

    def __post_init__(self):
        if not self.mask_token:
            raise ValueError("mask_token must be non-empty")
        object.__setattr__(self, "month_lexicon", frozenset(w.lower() for w in self.month_lexicon))
        object.__setattr__(self, "entity_lexicon", frozenset(w.lower() for w in self.entity_lexicon))

    def matches(self, core: str) -> bool:
        low = core.lower()
        if low in self.month_lexicon or low in self.entity_lexicon:
            return True
        if core.isdigit() and len(core) == 4 and self.year_min <= int(core) <= self.year_max:
            return True
        return False


def _mask_text(text: str, rules: MaskRules) -> str:
    def sub(m: re.Match) -> str:
        tok = m.group(0)
        core = tok.strip(_PUNCT)
        if core and rules.matches(core):
            start = tok.index(core)
            return tok[:start] + rules.mask_token + tok[start + len(core):]
        return tok

    return re.sub(r"\S+", sub, text)


def mask_identity(c: TextChunk, rules: MaskRules) -> TextChunk:
    """Replace year/month/entity tokens with the mask token.

    Punctuation attached to a masked token and all whitespace structure are
    preserved, so token counts are unchanged and the operation is idempotent.
    """
    return replace(c, text=_mask_text(c.text, rules))


@dataclass(frozen=True)
class SentimentLexicon:
    positive: frozenset[str]
    negative: frozenset[str]

    def __post_init__(self):
        pos = frozenset(w.lower() for w in self.positive)
        neg = frozenset(w.lower() for w in self.negative)
        if pos & neg:
            raise ValueError(f"lexicons overlap: {sorted(pos & neg)[:5]}")
        object.__setattr__(self, "positive", pos)
        object.__setattr__(self, "negative", neg)


def load_lexicon(path) -> frozenset[str]:
    """Plain-text word list, one word per line, '#' comments."""
    words = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                words.add(line.lower())
    return frozenset(words)


def lm_sentiment(text: str, lex: SentimentLexicon) -> float:
    """Net tone (P - N) / (P + N) over lexicon token counts; 0 with no hits."""
    if not lex.positive and not lex.negative:
        raise ValueError("sentiment lexicon is empty")
    pos = neg = 0
    for tok in tokenize(text):
        low = tok.lower()
        if low in lex.positive:
            pos += 1
        elif low in lex.negative:
            neg += 1
    total = pos + neg
    if total == 0:
        return 0.0
    return (pos - neg) / total


# Minimal English stopword list; configurable at the call sites that need it.
DEFAULT_STOPWORDS = frozenset(
    """a about above after again all also am an and any are as at be because been
    before being below between both but by can could did do does doing down during
    each few for from further had has have having he her here hers him his how i
    if in into is it its just me more most my no nor not now of off on once only
    or other our ours out over own same she should so some such than that the
    their theirs them then there these they this those through to too under until
    up very was we were what when where which while who whom why will with would
    you your yours""".split()
)

DEFAULT_TIME_WORDS = frozenset(
    """year years quarter quarters month months week weeks day days today
    yesterday tomorrow annual annually quarterly monthly weekly daily q1 q2 q3
    q4 fiscal""".split()
)

_SUFFIX_RULES = (
    ("ies", "y"),
    ("sses", "ss"),
    ("ing", ""),
    ("ed", ""),
    ("es", ""),
    ("s", ""),
)


def lemmatize(word: str) -> str:
    """Deterministic suffix-rule lemmatizer collapsing plural/verb forms.

    Only -s/-es/-ies/-ing/-ed are handled; enough to merge noun and verb
    variants for bigram counting, with no dictionary dependency.
    """
    low = word.lower()
    for suffix, repl in _SUFFIX_RULES:
        if low.endswith(suffix):
            stem = low[: -len(suffix)] + repl
            if len(stem) >= 3:
                return stem
            break
    return low


def top_bigrams(
    texts: Sequence[str],
    k: int = 25,
    stopwords: frozenset[str] = DEFAULT_STOPWORDS,
    time_words: frozenset[str] = DEFAULT_TIME_WORDS,
) -> list[tuple[str, int]]:
    """Most frequent ``k`` lemmatized bigrams, excluding stop/time words.

    A bigram is excluded if either token (pre-lemmatization) is a stopword or
    a time word. Ties are broken lexicographically.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    excluded = {w.lower() for w in stopwords} | {w.lower() for w in time_words}
    counts: Counter[str] = Counter()
    for text in texts:
        toks = [t.lower() for t in tokenize(text)]
        for first, second in zip(toks, toks[1:]):
            if first in excluded or second in excluded:
                continue
            counts[f"{lemmatize(first)} {lemmatize(second)}"] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]


def write_bigram_csv(rows: Sequence[tuple[str, int]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bigram,count\n")
        for bigram, count in rows:
            fh.write(f'"{bigram}",{count}\n')
