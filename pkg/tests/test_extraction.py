from __future__ import annotations

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dtkg.embedding import Embedder, MockEmbedder
from dtkg.extraction import (
    RETRY_MARKER,
    AtomicFact,
    Chunk,
    DecompositionError,
    Document,
    ExtractionError,
    PromptTemplate,
    ReplyFormatError,
    build_atomic_tkg,
    chunk_document,
    decompose,
    decompose_all,
    estimate_tokens,
    extract_all,
    extract_quintuples,
    parse_fact_lines,
    parse_quintuples,
    split_sentences,
)
from dtkg.llm import Gateway, make_gateway, BackendConfig
from dtkg.model import parse_timestamp, validate

OBS = parse_timestamp("2025-01-02")


class Scripted:
    """Backend replying from a queue and recording each request."""

    kind = "scripted"

    def __init__(self, *replies):
        self.replies = list(replies)
        self.requests = []

    def complete(self, req):
        self.requests.append(req)
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply


def _fact(text: str) -> AtomicFact:
    return AtomicFact("d:0:0", text, OBS, ("d", 0))


def test_estimate_tokens():
    assert estimate_tokens("") == 0
    assert estimate_tokens("one two three") == 4
    assert estimate_tokens(" ".join(["w"] * 300)) == 400


@given(st.integers(0, 2000))
def test_estimate_tokens_is_ceiling(words):
    assert estimate_tokens(" ".join(["w"] * words)) == math.ceil(words * 4 / 3)


def test_split_sentences_guards_abbreviations():
    text = "Dr. Smith met Mr. Jones in the U.S. on Monday. They agreed! Did they sign? Yes."
    assert split_sentences(text) == [
        "Dr. Smith met Mr. Jones in the U.S. on Monday.", "They agreed!", "Did they sign?", "Yes.",
    ]


def test_split_keeps_sentences_ending_in_initials():
    assert split_sentences("John Doe became the CEO of X. He smiled.") == [
        "John Doe became the CEO of X.", "He smiled.",
    ]


def test_chunking_packs_and_flags_oversized():
    short = " ".join(["a"] * 10) + "."
    huge = " ".join(["b"] * 40) + "."
    doc = Document("d", " ".join([short, short, huge, short]), OBS)
    chunks = chunk_document(doc, max_tokens=30)
    assert [c.oversized for c in chunks] == [False, True, False]
    assert [c.index for c in chunks] == [0, 1, 2]
    assert all(c.token_count <= 30 for c in chunks if not c.oversized)
    assert chunks[0].text.count(".") == 2


@given(st.lists(st.integers(1, 60), min_size=1, max_size=30), st.integers(16, 120))
def test_chunks_respect_budget_and_keep_order(lengths, budget):
    sentences = [" ".join([f"w{i}"] * n) + "." for i, n in enumerate(lengths)]
    chunks = chunk_document(Document("d", " ".join(sentences), OBS), budget)
    assert " ".join(c.text for c in chunks) == " ".join(sentences)
    for c in chunks:
        assert c.oversized == (c.token_count > budget)
        if c.oversized:
            assert c.text.count(".") == 1


def test_chunk_budget_floor():
    with pytest.raises(ValueError):
        chunk_document(Document("d", "x.", OBS), max_tokens=5)


def test_document_requires_text():
    with pytest.raises(ValueError):
        Document("d", "   ", OBS)


def test_prompt_template_renders_observation_time():
    req = PromptTemplate.load("decompose").request("Some text.", parse_timestamp("2024-06-18"))
    assert "June 18, 2024 (2024-06-18)" in req.user_prompt
    assert req.user_prompt.endswith("Some text.")
    assert req.temperature == 0.0


def test_prompt_directory_override(tmp_path):
    (tmp_path / "decompose.prompt").write_text("sys\n----- USER -----\nT: $text $observed_iso")
    assert PromptTemplate.load("decompose", tmp_path).request("x", 0).user_prompt == "T: x 1970-01-01"
    (tmp_path / "bad.prompt").write_text("no separator")
    with pytest.raises(ValueError):
        PromptTemplate.load("bad", tmp_path)


def test_parse_fact_lines():
    assert parse_fact_lines("- one\n\n- two\n") == ["one", "two"]
    for bad in ("one", "", "- ", "- ok\n* no"):
        with pytest.raises(ReplyFormatError):
            parse_fact_lines(bad)


def test_decompose_retries_once_then_succeeds():
    backend = Scripted("Sure! Here you go", "- fixed fact")
    chunk = Chunk("d", 0, "text", 1, OBS)
    facts = decompose(chunk, Gateway(backend))
    assert [f.text for f in facts] == ["fixed fact"]
    assert facts[0].fact_id == "d:0:0" and facts[0].observed_at == OBS
    assert RETRY_MARKER in backend.requests[1].user_prompt
    assert "Sure! Here you go" in backend.requests[1].user_prompt


def test_decompose_error_keeps_raw_reply():
    backend = Scripted("nope", "still nope")
    with pytest.raises(DecompositionError) as info:
        decompose(Chunk("d", 0, "text", 1, OBS), Gateway(backend))
    assert info.value.raw_reply == "still nope"


def test_decompose_all_isolates_failures():
    backend = Scripted("- a", RuntimeError("down"), "- c")
    chunks = [Chunk("d", i, "t", 1, OBS) for i in range(3)]
    out = decompose_all(chunks, Gateway(backend, max_concurrent_requests=1))
    assert [f.text for f in out[0]] == ["a"]
    assert isinstance(out[1], RuntimeError)
    assert [f.fact_id for f in out[2]] == ["d:2:0"]


def test_parse_quintuples_normalizes():
    reply = ('```json\n[{"subject": "John  Doe", "subject_label": "Person", "predicate": "is CEO", '
             '"object": "X", "object_label": "Organization", "t_start": "01-01-2025", "t_end": null}]\n```')
    (t,) = parse_quintuples(reply)
    assert (t.subject, t.subject_label, t.predicate, t.object) == ("john_doe", "person", "is_ceo", "x")
    assert t.t_start == (parse_timestamp("2025-01-01"),) and t.t_end == ()


@pytest.mark.parametrize("reply", [
    "not json", "{}", "[1]", '[{"subject": "a"}]',
    '[{"subject": "", "subject_label": "l", "predicate": "p", "object": "o", "object_label": "l", '
    '"t_start": [], "t_end": []}]',
    '[{"subject": "a", "subject_label": "l", "predicate": "p", "object": "o", "object_label": "l", '
    '"t_start": ["someday"], "t_end": []}]',
])
def test_parse_quintuples_rejects(reply):
    with pytest.raises(ReplyFormatError):
        parse_quintuples(reply)


def test_parse_quintuples_accepts_empty_array():
    assert parse_quintuples("[]") == []


def test_build_atomic_tkg_drops_inverted_interval(caplog):
    (good,) = parse_quintuples('[{"subject": "a", "subject_label": "l", "predicate": "p", "object": "b", '
                               '"object_label": "l", "t_start": ["2020-01-01"], "t_end": ["2021-01-01"]}]')
    bad = good.__class__(*list(vars(good).values())[:5], good.t_end, good.t_start)
    g = build_atomic_tkg([good, bad], OBS)
    assert len(g.relations) == 1 and g.relations[0].t_obs == (OBS,)
    assert "start after end" in caplog.text


def test_extract_all_embeds_every_string():
    gw = make_gateway(BackendConfig())
    emb = Embedder(MockEmbedder())
    (g,) = extract_all([_fact("John Doe became the CEO of X on 01-01-2025.")], gw, emb)
    assert validate(g) == []
    assert all(e.has_embeddings for e in g.entities)
    assert g.relations[0].predicate_embedding is not None
    assert g.relations[0].t_start == (parse_timestamp("2025-01-01"),)


def test_extract_retry_and_error():
    ok = ('[{"subject": "a", "subject_label": "l", "predicate": "p", "object": "b", '
          '"object_label": "l", "t_start": [], "t_end": []}]')
    backend = Scripted("garbage", ok)
    g = extract_quintuples(_fact("f"), Gateway(backend), Embedder(MockEmbedder()))
    assert len(g.relations) == 1 and RETRY_MARKER in backend.requests[1].user_prompt
    with pytest.raises(ExtractionError) as info:
        extract_quintuples(_fact("f"), Gateway(Scripted("x", "y")), Embedder(MockEmbedder()))
    assert info.value.raw_reply == "y"


def test_embedding_failure_fails_all_slots():
    class Broken:
        provider_id, model_id = "broken", "b"

        def embed_texts(self, texts):
            raise RuntimeError("embedding service down")

    ok = ('[{"subject": "a", "subject_label": "l", "predicate": "p", "object": "b", '
          '"object_label": "l", "t_start": [], "t_end": []}]')
    out = extract_all([_fact("1"), _fact("2")], Gateway(Scripted(ok, ok), 1), Embedder(Broken()))
    assert all(isinstance(o, RuntimeError) for o in out)


def test_extract_all_empty():
    assert extract_all([], Gateway(Scripted()), Embedder(MockEmbedder())) == []
