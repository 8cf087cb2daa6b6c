"""Shared builders for the test suite."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from dtkg.embedding import Embedder, MockEmbedder
from dtkg.extraction import Document
from dtkg.llm import BackendConfig, make_gateway
from dtkg.merge import MergeConfig
from dtkg.model import Entity, TemporalRelation, Tkg, parse_timestamp
from dtkg.pipeline import Pipeline, PipelineConfig, group_by_observation

GOLDEN = Path(__file__).resolve().parent / "golden"

REAL_MADRID = (
    "On June 18, 2024, Real Madrid won the Champions League final with a 2-1 victory. "
    "Following the triumph, fans of Real Madrid celebrated the Champions League victory across the city."
)

WORKED_EXAMPLES: dict[str, list[tuple[str, str, str]]] = {
    "ceo": [
        ("ceo-1", "John Doe became the CEO of X on 01-01-2025.", "2025-01-01"),
        ("ceo-2", "John Doe is no longer the CEO of X on 01-01-2026.", "2026-01-01"),
    ],
    "real_madrid": [("rm-1", REAL_MADRID, "2024-06-19")],
    "death_toll": [
        ("toll-1", "By January 24, 2020, the coronavirus had killed 26 people in China.", "2020-01-24"),
        ("toll-2", "By January 27, 2020, the coronavirus had killed at least 80 people in China.", "2020-01-28"),
    ],
    "protests": [
        ("protest-1", "Protesters demonstrated against stay-at-home orders in the week of April 13, 2020.",
         "2020-04-16"),
        ("protest-2", "Protesters rallied against stay-at-home orders in the week of April 19, 2020.",
         "2020-04-19"),
    ],
}


def docs_for(example: str) -> list[Document]:
    return [Document(i, text, parse_timestamp(obs)) for i, text, obs in WORKED_EXAMPLES[example]]


def mock_pipeline(workers: int = 1, **overrides) -> Pipeline:
    cfg = PipelineConfig(merge=MergeConfig(workers=workers, executor=overrides.pop("executor", "process")),
                         **overrides)
    return Pipeline(cfg, make_gateway(BackendConfig(kind="mock")), Embedder(MockEmbedder()))


def run_docs(docs: list[Document], workers: int = 1, **overrides) -> Tkg:
    return mock_pipeline(workers, **overrides).run_stream(group_by_observation(docs))


def vec(text: str) -> np.ndarray:
    return MockEmbedder().vector(text)


def entity(name: str, label: str = "entity") -> Entity:
    return Entity(name, label, vec(name), vec(label))


def relation(s: str, p: str, o: str, start=(), end=(), obs=(0,), labels=("entity", "entity")) -> TemporalRelation:
    return TemporalRelation((s, labels[0]), p, (o, labels[1]), tuple(start), tuple(end), tuple(obs), vec(p))


def graph(*relations: TemporalRelation) -> Tkg:
    ents = [entity(n, l) for r in relations for (n, l) in (r.subject, r.object)]
    return Tkg.from_parts(ents, relations)
