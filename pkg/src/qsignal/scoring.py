"""Policy prompts, provider querying with cache/retry, parsing, aggregation.

The provider is pluggable: a deterministic offline stub driven by a keyword
rule table (shipped in package data, overridable), or a remote backend
speaking the chat-completion JSON protocol. Responses are cached append-only
and keyed by (model, prompt hash) so reruns are byte-identical and free.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Callable, Iterable, Sequence

from .corpus import TextChunk

log = logging.getLogger(__name__)

__all__ = [
    "PolicyKind",
    "Choice",
    "Prompt",
    "ChunkScore",
    "CallScore",
    "ProviderConfig",
    "ResponseCache",
    "ScoringError",
    "ParseError",
    "TransportError",
    "ProviderRefusal",
    "EmptyInputError",
    "build_prompt",
    "query_provider",
    "parse_response",
    "aggregate_mean",
    "aggregate_maxabs",
    "score_corpus",
    "score_correlation",
    "write_score_csv",
]


class ScoringError(Exception):
    pass


class ParseError(ScoringError):
    pass


class TransportError(ScoringError):
    pass


class ProviderRefusal(ScoringError):
    pass


class EmptyInputError(ScoringError):
    pass


class PolicyKind(Enum):
    INVESTMENT = "investment"
    DIVIDEND = "dividend"
    EMPLOYMENT = "employment"


class Choice(Enum):
    DECREASE_SUBSTANTIALLY = "decrease substantially"
    DECREASE = "decrease"
    NO_CHANGE = "no change"
    INCREASE = "increase"
    INCREASE_SUBSTANTIALLY = "increase substantially"
    NO_INFORMATION = "no information is provided"


CHOICE_SCORES: dict[Choice, float] = {
    Choice.DECREASE_SUBSTANTIALLY: -1.0,
    Choice.DECREASE: -0.5,
    Choice.NO_CHANGE: 0.0,
    Choice.INCREASE: 0.5,
    Choice.INCREASE_SUBSTANTIALLY: 1.0,
    Choice.NO_INFORMATION: 0.0,
}

INVESTMENT_PROMPT_HEADER = (
    "The following text is an excerpt from a company's earnings call "
    "transcripts. You are a finance expert. Based on this text only, please "
    "answer the following question. How does the firm plan to change its "
    "capital spending over the next year? There are five choices: Increase "
    "substantially, increase, no change, decrease, and decrease "
    "substantially. Please select one of the above five choices for each "
    "question and provide a one-sentence explanation of your choice for each "
    "question. The format for the answer to each question should be \"choice "
    "- explanation.\" If no relevant information is provided related to the "
    "question, answer \"no information is provided.\""
)

# Two-question prompt covering dividends (question 1) and employment
# (question 2); the parser picks the answer segment by question order.
DIVIDEND_EMPLOYMENT_PROMPT_HEADER = (
    "The following text is an excerpt from a company's earnings call "
    "transcripts. You are a finance expert. Based on this text only, please "
    "answer the following questions. 1. How does the firm plan to change its "
    "dividend payment over the next year? 2. How does the firm plan to "
    "change its number of employees over the next year? There are five "
    "choices: Increase substantially, increase, no change, decrease, and "
    "decrease substantially. Please select one of the above five choices for "
    "each question and provide a one-sentence explanation of your choice for "
    "each question. The format for the answer to each question should be "
    "\"choice - explanation.\" If no relevant information is provided "
    "related to the question, answer \"no information is provided. Please "
    "answer each question independently.\""
)

PROMPT_HEADERS: dict[PolicyKind, str] = {
    PolicyKind.INVESTMENT: INVESTMENT_PROMPT_HEADER,
    PolicyKind.DIVIDEND: DIVIDEND_EMPLOYMENT_PROMPT_HEADER,
    PolicyKind.EMPLOYMENT: DIVIDEND_EMPLOYMENT_PROMPT_HEADER,
}

# Index of each policy's answer within a multi-question response.
_QUESTION_INDEX: dict[PolicyKind, int] = {
    PolicyKind.INVESTMENT: 0,
    PolicyKind.DIVIDEND: 0,
    PolicyKind.EMPLOYMENT: 1,
}


@dataclass(frozen=True)
class Prompt:
    policy: PolicyKind
    header: str
    body: str

    @property
    def full_text(self) -> str:
        return f"{self.header}\n\n{self.body}"

    def sha256(self) -> str:
        return hashlib.sha256(self.full_text.encode("utf-8")).hexdigest()


def build_prompt(policy: PolicyKind, chunk: TextChunk) -> Prompt:
    """Attach the policy's instruction header to a chunk body."""
    if not chunk.text:
        raise ValueError("chunk text is empty")
    return Prompt(policy=policy, header=PROMPT_HEADERS[policy], body=chunk.text)


@dataclass(frozen=True)
class ChunkScore:
    call_id: str
    chunk_index: int
    policy: PolicyKind
    choice: Choice
    explanation: str
    score: float
    parse_failed: bool = False

    def __post_init__(self):
        if self.score != CHOICE_SCORES[self.choice]:
            raise ValueError(f"score {self.score} is not canonical for {self.choice}")


@dataclass(frozen=True)
class CallScore:
    call_id: str
    policy: PolicyKind
    mean_score: float
    maxabs_score: float
    n_chunks: int
    n_errors: int = 0


@dataclass
class ProviderConfig:
    backend: str = "stub"  # "stub" | "remote"
    endpoint: str | None = None
    model_name: str = "stub-v1"
    api_key: str | None = None
    temperature: float = 0.0
    max_concurrency: int = 4
    max_attempts: int = 3
    backoff_seconds: float = 1.0
    cache_path: str | None = None
    stub_rules_path: str | None = None
    parse_error_policy: str = "no_information"  # or "drop"
    timeout: float = 60.0

    def __post_init__(self):
        if self.backend not in ("stub", "remote"):
            raise ValueError(f"bad backend {self.backend!r}")
        if self.backend == "remote" and not self.endpoint:
            raise ValueError("remote backend requires an endpoint")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")


class ResponseCache:
    """Append-only line-delimited JSON response cache.

    Each line: {"key", "model", "prompt_sha256", "response", "timestamp"}.
    Concurrent appends are serialized through a single lock; first write
    wins for a key and later writes of the same key are skipped.
    """

    def __init__(self, path=None):
        self.path = path
        self._lock = threading.Lock()
        self._entries: dict[str, str] = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    for line in fh:
                        if line.strip():
                            rec = json.loads(line)
                            self._entries.setdefault(rec["key"], rec["response"])
            except FileNotFoundError:
                pass

    @staticmethod
    def key(model: str, prompt: Prompt) -> str:
        return hashlib.sha256(f"{model}\x00{prompt.full_text}".encode("utf-8")).hexdigest()

    def get(self, key: str) -> str | None:
        return self._entries.get(key)

    def put(self, key: str, model: str, prompt: Prompt, response: str) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = response
            if self.path is not None:
                rec = {
                    "key": key,
                    "model": model,
                    "prompt_sha256": prompt.sha256(),
                    "response": response,
                    "timestamp": time.time(),
                }
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec) + "\n")


def _load_stub_rules(path=None) -> dict:
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    with resources.files("qsignal.data").joinpath("stub_rules.json").open(encoding="utf-8") as fh:
        return json.load(fh)


def _stub_answer(body: str, rules: list[dict]) -> str:
    """First keyword rule whose phrase appears (case-insensitively) wins."""
    low = body.lower()
    for rule in rules:
        if rule["keyword"].lower() in low:
            return f"{rule['choice']} - {rule['explanation']}"
    return "no information is provided"


def _stub_response(p: Prompt, rules_table: dict) -> str:
    if p.policy is PolicyKind.INVESTMENT:
        return _stub_answer(p.body, rules_table["investment"])
    div = _stub_answer(p.body, rules_table["dividend"])
    emp = _stub_answer(p.body, rules_table["employment"])
    return f"1. {div}\n2. {emp}"


def _remote_response(p: Prompt, cfg: ProviderConfig) -> str:
    import requests

    payload = {
        "model": cfg.model_name,
        "messages": [{"role": "user", "content": p.full_text}],
        "temperature": cfg.temperature,
    }
    headers = {"Content-Type": "application/json"}
    if cfg.api_key:
        headers["Authorization"] = f"Bearer {cfg.api_key}"
    last_exc: Exception | None = None
    for attempt in range(cfg.max_attempts):
        try:
            resp = requests.post(cfg.endpoint, json=payload, headers=headers, timeout=cfg.timeout)
        except requests.RequestException as exc:
            last_exc = exc
            time.sleep(cfg.backoff_seconds * 2**attempt)
            continue
        if resp.status_code == 200:
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, ValueError) as exc:
                raise ProviderRefusal(f"malformed provider response: {exc}") from exc
        if resp.status_code in (429, 500, 502, 503, 504):
            last_exc = TransportError(f"HTTP {resp.status_code}")
            time.sleep(cfg.backoff_seconds * 2**attempt)
            continue
        raise ProviderRefusal(f"provider returned HTTP {resp.status_code}: {resp.text[:200]}")
    raise TransportError(f"exhausted {cfg.max_attempts} attempts: {last_exc}")


def query_provider(p: Prompt, cfg: ProviderConfig, cache: ResponseCache | None = None) -> str:
    """Return the raw response for a prompt, consulting the cache first."""
    if cache is None:
        cache = ResponseCache(cfg.cache_path)
    key = ResponseCache.key(cfg.model_name, p)
    hit = cache.get(key)
    if hit is not None:
        return hit
    if cfg.backend == "stub":
        response = _stub_response(p, _load_stub_rules(cfg.stub_rules_path))
    else:
        response = _remote_response(p, cfg)
    cache.put(key, cfg.model_name, p, response)
    return response


# Longest phrases first so "decrease substantially" beats "decrease" at the
# same match position.
_CHOICE_PHRASES: list[tuple[str, Choice]] = sorted(
    [(c.value, c) for c in Choice],
    key=lambda pair: -len(pair[0]),
)

_ANSWER_SPLIT = re.compile(r"(?:^|\n)\s*(\d+)\s*[.):]\s*")


def _split_numbered(raw: str) -> list[str]:
    """Split a multi-question response on numbered-answer boundaries."""
    parts = _ANSWER_SPLIT.split(raw)
    if len(parts) <= 1:
        return [raw]
    # parts = [preamble, num, seg, num, seg, ...]
    return [seg for seg in parts[2::2]]


def _find_choice(segment: str) -> tuple[Choice, str] | None:
    low = segment.lower()
    best: tuple[int, int, Choice] | None = None  # (pos, -len, choice)
    for phrase, choice in _CHOICE_PHRASES:
        pos = low.find(phrase)
        if pos < 0:
            continue
        cand = (pos, -len(phrase), choice)
        if best is None or cand < best:
            best = cand
    if best is None:
        return None
    pos, neg_len, choice = best
    rest = segment[pos - neg_len :]
    explanation = rest.lstrip(" \t-–—:.").strip()
    if choice is Choice.NO_INFORMATION:
        explanation = ""
    return choice, explanation


def parse_response(
    raw: str,
    policy: PolicyKind,
    call_id: str = "",
    chunk_index: int = 0,
    parse_error_policy: str = "raise",
) -> ChunkScore:
    """Extract the choice for ``policy`` from a raw response.

    For two-question responses, the segment matching the policy's question
    order is used; a missing segment maps to "no information". When no choice
    token is found, behavior follows ``parse_error_policy``: "raise" or
    "no_information" (score 0 with the parse_failed flag set).
    """
    if not raw:
        raise ParseError("empty response")
    if policy is PolicyKind.INVESTMENT:
        segment = raw
    else:
        segments = _split_numbered(raw)
        idx = _QUESTION_INDEX[policy]
        if len(segments) == 1:
            # Unnumbered single answer: only usable for the first question.
            segment = segments[0] if idx == 0 else ""
        else:
            segment = segments[idx] if idx < len(segments) else ""
        if not segment.strip():
            return ChunkScore(call_id, chunk_index, policy, Choice.NO_INFORMATION, "", 0.0)
    found = _find_choice(segment)
    if found is None:
        if parse_error_policy == "no_information":
            log.warning("parse failure for %s chunk %d: %r", call_id, chunk_index, raw[:80])
            return ChunkScore(
                call_id, chunk_index, policy, Choice.NO_INFORMATION, "", 0.0, parse_failed=True
            )
        raise ParseError(f"no choice token in response: {raw[:120]!r}")
    choice, explanation = found
    return ChunkScore(call_id, chunk_index, policy, choice, explanation, CHOICE_SCORES[choice])


def _check_same_call(scores: Sequence[ChunkScore]) -> None:
    if not scores:
        raise EmptyInputError("no chunk scores")
    first = scores[0]
    for s in scores[1:]:
        if s.call_id != first.call_id or s.policy is not first.policy:
            raise ValueError("chunk scores span multiple calls or policies")


def aggregate_mean(scores: Sequence[ChunkScore]) -> float:
    """Arithmetic mean of chunk scores for one call and policy."""
    _check_same_call(scores)
    return sum(s.score for s in scores) / len(scores)


def aggregate_maxabs(scores: Sequence[ChunkScore]) -> float:
    """Score with the greatest absolute value; opposite-sign tie gives 0."""
    _check_same_call(scores)
    peak = max(abs(s.score) for s in scores)
    if peak == 0.0:
        return 0.0
    signs = {s.score for s in scores if abs(s.score) == peak}
    if len(signs) > 1:
        return 0.0
    return signs.pop()


def score_corpus(
    chunks_by_call: dict[str, Sequence[TextChunk]],
    policies: Sequence[PolicyKind],
    cfg: ProviderConfig,
) -> list[CallScore]:
    """Score every (call, policy) pair; per-chunk failures never abort the batch."""
    from concurrent.futures import ThreadPoolExecutor

    cache = ResponseCache(cfg.cache_path)
    results: list[CallScore] = []

    def run_one(policy: PolicyKind, c: TextChunk) -> ChunkScore:
        prompt = build_prompt(policy, c)
        try:
            raw = query_provider(prompt, cfg, cache)
        except (TransportError, ProviderRefusal) as exc:
            log.warning("provider failure for %s chunk %d: %s", c.call_id, c.chunk_index, exc)
            return ChunkScore(
                c.call_id, c.chunk_index, policy, Choice.NO_INFORMATION, "", 0.0, parse_failed=True
            )
        return parse_response(
            raw, policy, c.call_id, c.chunk_index, parse_error_policy=cfg.parse_error_policy
        )

    for call_id in sorted(chunks_by_call):
        chunks = sorted(chunks_by_call[call_id], key=lambda c: c.chunk_index)
        for policy in policies:
            if cfg.max_concurrency > 1 and len(chunks) > 1:
                with ThreadPoolExecutor(max_workers=cfg.max_concurrency) as pool:
                    chunk_scores = list(pool.map(lambda c: run_one(policy, c), chunks))
            else:
                chunk_scores = [run_one(policy, c) for c in chunks]
            n_errors = sum(s.parse_failed for s in chunk_scores)
            kept = chunk_scores
            if cfg.parse_error_policy == "drop":
                kept = [s for s in chunk_scores if not s.parse_failed] or chunk_scores
            results.append(
                CallScore(
                    call_id=call_id,
                    policy=policy,
                    mean_score=aggregate_mean(kept),
                    maxabs_score=aggregate_maxabs(kept),
                    n_chunks=len(chunks),
                    n_errors=n_errors,
                )
            )
    return results


def score_correlation(a: Sequence[float], b: Sequence[float]) -> float:
    """Pearson correlation of two score runs over the same corpus.

    Repeatability harness: on a deterministic provider this equals 1.
    """
    import math

    if len(a) != len(b) or not a:
        raise EmptyInputError("score lists must be equal-length and non-empty")
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    if va == 0 or vb == 0:
        raise ValueError("zero variance in a score run")
    return cov / math.sqrt(va * vb)


def write_score_csv(scores: Sequence[CallScore], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("call_id,policy,mean_score,maxabs_score,n_chunks,n_errors\n")
        for s in scores:
            fh.write(
                f"{s.call_id},{s.policy.value},{s.mean_score:.10g},"
                f"{s.maxabs_score:.10g},{s.n_chunks},{s.n_errors}\n"
            )
