"""Text to atomic facts to atomic temporal graphs.

Documents are split into sentence-packed chunks under a token budget, each
chunk is decomposed into atomic facts by the completion model, and every
fact is turned into a small graph of 5-tuples stamped with its observation
time.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from string import Template
from typing import Sequence

from .embedding import Embedder
from .llm import CompletionRequest, Gateway
from .model import (
    Entity,
    InvalidNameError,
    TemporalRelation,
    Timestamp,
    Tkg,
    format_timestamp,
    human_date,
    normalize_name,
    parse_timestamp,
    time_list,
)

logger = logging.getLogger(__name__)

MAX_CHUNK_TOKENS = 400
MIN_CHUNK_TOKENS = 16

USER_MARKER = "----- USER -----"
RETRY_MARKER = "----- PREVIOUS REPLY (unparseable) -----"

ABBREVIATIONS = frozenset(
    {
        "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "inc", "ltd", "co",
        "corp", "dept", "gov", "gen", "sen", "rep", "vs", "etc", "e.g", "i.e", "u.s",
        "u.k", "u.n", "jan", "feb", "mar", "apr", "jun", "jul", "aug", "sep",
        "sept", "oct", "nov", "dec", "fig", "approx", "est",
    }
)

_BOUNDARY = re.compile(r"[.!?]+[\"')\]]*(?=\s+)")


class ReplyFormatError(ValueError):
    pass


class DecompositionError(RuntimeError):
    def __init__(self, message: str, raw_reply: str = "") -> None:
        super().__init__(message)
        self.raw_reply = raw_reply


class ExtractionError(RuntimeError):
    def __init__(self, message: str, raw_reply: str = "") -> None:
        super().__init__(message)
        self.raw_reply = raw_reply


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    observed_at: Timestamp

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValueError(f"document {self.doc_id!r} has no text")


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    index: int
    text: str
    token_count: int
    observed_at: Timestamp
    oversized: bool = False


@dataclass(frozen=True)
class AtomicFact:
    fact_id: str
    text: str
    observed_at: Timestamp
    source_chunk: tuple[str, int]


# -- chunking -----------------------------------------------------------------


def estimate_tokens(text: str) -> int:
    """ceil(4/3 * whitespace-separated words)."""
    words = len(text.split())
    return (4 * words + 2) // 3


def split_sentences(text: str) -> list[str]:
    sentences: list[str] = []
    start = 0
    for m in _BOUNDARY.finditer(text):
        head = text[start : m.start()]
        last_word = head.rsplit(None, 1)[-1].lower() if head.split() else ""
        if text[m.start()] == "." and last_word in ABBREVIATIONS:
            continue
        piece = text[start : m.end()].strip()
        if piece:
            sentences.append(piece)
        start = m.end()
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def chunk_document(doc: Document, max_tokens: int = MAX_CHUNK_TOKENS) -> list[Chunk]:
    """Greedily pack consecutive sentences while the estimate stays within
    ``max_tokens``; a sentence over budget becomes its own flagged chunk."""
    if max_tokens < MIN_CHUNK_TOKENS:
        raise ValueError(f"max_tokens must be >= {MIN_CHUNK_TOKENS}")
    chunks: list[Chunk] = []
    current: list[str] = []
    words = 0

    def flush(oversized: bool = False) -> None:
        nonlocal current, words
        if current:
            text = " ".join(current)
            chunks.append(
                Chunk(doc.doc_id, len(chunks), text, estimate_tokens(text), doc.observed_at, oversized)
            )
        current, words = [], 0

    for sentence in split_sentences(doc.text):
        n = len(sentence.split())
        if (4 * n + 2) // 3 > max_tokens:
            flush()
            current, words = [sentence], n
            flush(oversized=True)
            continue
        if (4 * (words + n) + 2) // 3 > max_tokens:
            flush()
        current.append(sentence)
        words += n
    flush()
    return chunks


# -- prompts ------------------------------------------------------------------


@dataclass(frozen=True)
class PromptTemplate:
    system: str
    user: Template

    @classmethod
    def load(cls, name: str, directory: str | Path | None = None) -> PromptTemplate:
        if directory is not None:
            raw = (Path(directory) / f"{name}.prompt").read_text(encoding="utf-8")
        else:
            raw = resources.files("dtkg").joinpath(f"prompts/{name}.prompt").read_text(
                encoding="utf-8"
            )
        system, sep, user = raw.partition(USER_MARKER)
        if not sep:
            raise ValueError(f"prompt {name!r} lacks the {USER_MARKER!r} separator")
        return cls(system.strip(), Template(user.strip("\n")))

    def request(self, text: str, observed_at: Timestamp, max_output_tokens: int = 2048) -> CompletionRequest:
        user = self.user.substitute(
            text=text,
            observed_human=human_date(observed_at),
            observed_iso=format_timestamp(observed_at),
        )
        return CompletionRequest(self.system, user, 0.0, max_output_tokens)


def reformat_request(req: CompletionRequest, reply: str, problem: str) -> CompletionRequest:
    user = (
        f"{req.user_prompt}\n\n{RETRY_MARKER}\n{reply}\n----- END -----\n"
        f"That reply could not be parsed ({problem}). Reply again using exactly the required format."
    )
    return CompletionRequest(req.system_prompt, user, req.temperature, req.max_output_tokens)


# -- decomposition ------------------------------------------------------------


def parse_fact_lines(reply: str, max_tokens: int = MAX_CHUNK_TOKENS) -> list[str]:
    facts = []
    for line in reply.splitlines():
        line = line.strip()
        if not line:
            continue
        if not line.startswith("- "):
            raise ReplyFormatError(f"line does not start with '- ': {line[:80]!r}")
        fact = line[2:].strip()
        if not fact:
            raise ReplyFormatError("empty fact line")
        if estimate_tokens(fact) > max_tokens:
            raise ReplyFormatError("fact exceeds the token budget")
        facts.append(fact)
    if not facts:
        raise ReplyFormatError("reply contains no facts")
    return facts


def _facts_for(chunk: Chunk, texts: list[str]) -> list[AtomicFact]:
    return [
        AtomicFact(f"{chunk.doc_id}:{chunk.index}:{i}", t, chunk.observed_at, (chunk.doc_id, chunk.index))
        for i, t in enumerate(texts)
    ]


def decompose_all(
    chunks: Sequence[Chunk],
    gateway: Gateway,
    prompt: PromptTemplate | None = None,
    max_tokens: int = MAX_CHUNK_TOKENS,
) -> list[list[AtomicFact] | Exception]:
    """Decompose chunks in parallel; slot ``i`` holds the facts of
    ``chunks[i]`` or the error that prevented them."""
    prompt = prompt or PromptTemplate.load("decompose")
    reqs = [prompt.request(c.text, c.observed_at) for c in chunks]
    replies = gateway.complete_batch(reqs)
    out: list[list[AtomicFact] | Exception] = [None] * len(chunks)  # type: ignore[list-item]
    retry: dict[int, CompletionRequest] = {}
    first: dict[int, str] = {}
    for i, reply in enumerate(replies):
        if isinstance(reply, Exception):
            out[i] = reply
            continue
        try:
            out[i] = _facts_for(chunks[i], parse_fact_lines(reply, max_tokens))
        except ReplyFormatError as exc:
            first[i] = reply
            retry[i] = reformat_request(reqs[i], reply, str(exc))
    if retry:
        idx = list(retry)
        for i, reply in zip(idx, gateway.complete_batch([retry[i] for i in idx])):
            if isinstance(reply, Exception):
                out[i] = reply
                continue
            try:
                out[i] = _facts_for(chunks[i], parse_fact_lines(reply, max_tokens))
            except ReplyFormatError as exc:
                out[i] = DecompositionError(
                    f"chunk {chunks[i].doc_id}:{chunks[i].index}: {exc}", raw_reply=reply
                )
    return out


def decompose(chunk: Chunk, gateway: Gateway, prompt: PromptTemplate | None = None) -> list[AtomicFact]:
    (result,) = decompose_all([chunk], gateway, prompt)
    if isinstance(result, Exception):
        raise result
    return result


# -- 5-tuple extraction -------------------------------------------------------

_TUPLE_KEYS = ("subject", "subject_label", "predicate", "object", "object_label", "t_start", "t_end")


@dataclass(frozen=True)
class RawTuple:
    subject: str
    subject_label: str
    predicate: str
    object: str
    object_label: str
    t_start: tuple[int, ...]
    t_end: tuple[int, ...]


def _strip_fence(reply: str) -> str:
    text = reply.strip()
    m = re.fullmatch(r"```(?:json)?\s*(.*?)\s*```", text, flags=re.S)
    return m.group(1) if m else text


def parse_quintuples(reply: str) -> list[RawTuple]:
    try:
        data = json.loads(_strip_fence(reply))
    except json.JSONDecodeError as exc:
        raise ReplyFormatError(f"not JSON: {exc}") from None
    if not isinstance(data, list):
        raise ReplyFormatError("top-level value is not an array")
    out = []
    for item in data:
        if not isinstance(item, dict):
            raise ReplyFormatError("array item is not an object")
        missing = [k for k in _TUPLE_KEYS if k not in item]
        if missing:
            raise ReplyFormatError(f"missing keys {missing}")
        try:
            names = [normalize_name(str(item[k])) for k in _TUPLE_KEYS[:5]]
            times = []
            for k in ("t_start", "t_end"):
                values = item[k]
                if values is None:
                    values = []
                if not isinstance(values, list):
                    values = [values]
                times.append(time_list(parse_timestamp(v) for v in values))
        except (InvalidNameError, ValueError, TypeError) as exc:
            raise ReplyFormatError(str(exc)) from None
        out.append(RawTuple(*names, *times))
    return out


def build_atomic_tkg(
    tuples: Sequence[RawTuple], observed_at: Timestamp, vectors: dict[str, object] | None = None
) -> Tkg:
    vectors = vectors or {}
    entities: list[Entity] = []
    relations: list[TemporalRelation] = []
    for t in tuples:
        if len(t.t_start) == 1 and len(t.t_end) == 1 and t.t_start[0] > t.t_end[0]:
            logger.warning("dropping tuple with start after end: %s", t)
            continue
        for name, label in ((t.subject, t.subject_label), (t.object, t.object_label)):
            entities.append(Entity(name, label, vectors.get(name), vectors.get(label)))
        relations.append(
            TemporalRelation(
                (t.subject, t.subject_label),
                t.predicate,
                (t.object, t.object_label),
                t.t_start,
                t.t_end,
                (observed_at,),
                vectors.get(t.predicate),
            )
        )
    return Tkg.from_parts(entities, relations)


def extract_all(
    facts: Sequence[AtomicFact],
    gateway: Gateway,
    embedder: Embedder,
    prompt: PromptTemplate | None = None,
) -> list[Tkg | Exception]:
    """Extract one atomic graph per fact, in parallel, aligned with ``facts``."""
    if not facts:
        return []
    prompt = prompt or PromptTemplate.load("extract")
    reqs = [prompt.request(f.text, f.observed_at) for f in facts]
    replies = gateway.complete_batch(reqs)
    parsed: list[list[RawTuple] | Exception] = [None] * len(facts)  # type: ignore[list-item]
    retry: dict[int, CompletionRequest] = {}
    for i, reply in enumerate(replies):
        if isinstance(reply, Exception):
            parsed[i] = reply
            continue
        try:
            parsed[i] = parse_quintuples(reply)
        except ReplyFormatError as exc:
            retry[i] = reformat_request(reqs[i], reply, str(exc))
    if retry:
        idx = list(retry)
        for i, reply in zip(idx, gateway.complete_batch([retry[i] for i in idx])):
            if isinstance(reply, Exception):
                parsed[i] = reply
                continue
            try:
                parsed[i] = parse_quintuples(reply)
            except ReplyFormatError as exc:
                parsed[i] = ExtractionError(f"fact {facts[i].fact_id}: {exc}", raw_reply=reply)

    texts: dict[str, None] = {}
    for p in parsed:
        if isinstance(p, list):
            for t in p:
                for s in (t.subject, t.subject_label, t.predicate, t.object, t.object_label):
                    texts.setdefault(s)
    try:
        vectors = dict(zip(texts, embedder.embed(list(texts))))
    except Exception as exc:
        return [p if isinstance(p, Exception) else exc for p in parsed]

    return [
        p if isinstance(p, Exception) else build_atomic_tkg(p, f.observed_at, vectors)
        for p, f in zip(parsed, facts)
    ]


def extract_quintuples(
    fact: AtomicFact, gateway: Gateway, embedder: Embedder, prompt: PromptTemplate | None = None
) -> Tkg:
    (result,) = extract_all([fact], gateway, embedder, prompt)
    if isinstance(result, Exception):
        raise result
    return result
