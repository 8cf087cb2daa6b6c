"""Binary and parallel merging of temporal knowledge graphs.

No model calls happen here: entities resolve by exact (name, label) match or
hybrid-embedding similarity, relation names by predicate-embedding
similarity, and time lists by set union.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embedding import MissingEmbeddingError, SimilarityConfig
from .model import EMPTY, Entity, EntityKey, TemporalRelation, Tkg, union_times

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MergeConfig:
    theta_entity: float = 0.8
    theta_relation: float = 0.7
    workers: int = 8
    lam: float = 0.8
    beta: float = 0.2
    executor: str = "process"

    def __post_init__(self) -> None:
        for name in ("theta_entity", "theta_relation"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.executor not in ("process", "thread"):
            raise ValueError(f"unknown executor {self.executor!r}")

    @property
    def similarity(self) -> SimilarityConfig:
        return SimilarityConfig(self.lam, self.beta, self.theta_entity, self.theta_relation)


@dataclass
class MergeStats:
    rounds: int = 0
    graphs_per_round: list[int] = field(default_factory=list)
    seconds: float = 0.0


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise MissingEmbeddingError("zero embedding vector")
    return rows / norms


def _hybrid_rows(entities: Sequence[Entity], cfg: MergeConfig) -> np.ndarray:
    rows = []
    for e in entities:
        if e.name_embedding is None or e.label_embedding is None:
            raise MissingEmbeddingError(f"entity {e.key} has no embeddings")
        rows.append(cfg.lam * e.name_embedding.astype(np.float64) + cfg.beta * e.label_embedding)
    return _unit_rows(np.asarray(rows, dtype=np.float64))


def resolve_entities(
    left: Tkg, right: Tkg, cfg: MergeConfig = MergeConfig()
) -> tuple[dict[EntityKey, EntityKey], list[Entity]]:
    """Map every left entity into the merged namespace.

    Exact (name, label) matches win outright; otherwise the most similar right
    entity is taken when its score reaches ``theta_entity`` (ties go to the
    first right entity in key order). Unmapped left entities keep their key.
    Returns the mapping and the merged entity list (right entities first).
    """
    right_index = right.index
    mapping: dict[EntityKey, EntityKey] = {}
    pending: list[Entity] = []
    for e in left.entities:
        if e.key in right_index:
            mapping[e.key] = e.key
        else:
            pending.append(e)

    if pending and right.entities:
        sims = _hybrid_rows(pending, cfg) @ _hybrid_rows(right.entities, cfg).T
        best = np.argmax(sims, axis=1)
        for e, j, row in zip(pending, best, sims):
            mapping[e.key] = right.entities[j].key if row[j] >= cfg.theta_entity else e.key
    else:
        for e in pending:
            mapping[e.key] = e.key

    merged = list(right.entities)
    merged.extend(e for e in left.entities if mapping[e.key] not in right_index)
    return mapping, merged


def _predicate_table(
    relations: Sequence[TemporalRelation],
) -> tuple[list[str], np.ndarray | None, dict[str, int]]:
    names = sorted({r.predicate for r in relations})
    pos = {p: i for i, p in enumerate(names)}
    if not names:
        return names, None, pos
    vecs: list[np.ndarray | None] = [None] * len(names)
    for r in relations:
        i = pos[r.predicate]
        if vecs[i] is None:
            if r.predicate_embedding is None:
                raise MissingEmbeddingError(f"relation {r.triple} has no predicate embedding")
            vecs[i] = r.predicate_embedding
    return names, _unit_rows(np.asarray(vecs, dtype=np.float64)), pos


def binary_merge(left: Tkg, right: Tkg, cfg: MergeConfig = MergeConfig()) -> Tkg:
    """Merge ``left`` into ``right``; right-hand names are canonical.

    1. entity resolution (see :func:`resolve_entities`);
    2. left relation endpoints are rewritten through the mapping;
    3. a left relation whose predicate is within ``theta_relation`` of some
       right predicate adopts the closest one (name and embedding);
    4. if a right relation has the same rewritten endpoints and a predicate
       within ``theta_relation``, the left relation's start, end and
       observation times are unioned into it and the left relation is
       dropped; otherwise the rewritten relation is appended.
    """
    mapping, entities = resolve_entities(left, right, cfg)
    if not left.relations:
        return Tkg.from_parts(entities, right.relations)

    right_rels = right.relations
    l_names, l_vecs, l_pos = (
        _predicate_table(left.relations) if right_rels else ([], None, {})
    )
    r_names, r_vecs, r_pos = _predicate_table(right_rels)
    r_embedding = {}
    for r in right_rels:
        r_embedding.setdefault(r.predicate, r.predicate_embedding)

    # left predicate -> adopted right predicate (None when below threshold)
    adopted: dict[str, str | None] = {}
    if right_rels:
        sims = l_vecs @ r_vecs.T
        best = np.argmax(sims, axis=1)
        for i, name in enumerate(l_names):
            j = best[i]
            adopted[name] = r_names[j] if sims[i, j] >= cfg.theta_relation else None
        # predicate-to-predicate similarity among right names, for the
        # temporal check after adoption
        rr = r_vecs @ r_vecs.T

    by_endpoints: dict[tuple[EntityKey, EntityKey], list[int]] = {}
    for idx, r in enumerate(right_rels):
        by_endpoints.setdefault((r.subject, r.object), []).append(idx)

    absorbed: dict[int, tuple[set[int], set[int], set[int]]] = {}
    appended: list[TemporalRelation] = []
    for r in left.relations:
        subj, obj = mapping[r.subject], mapping[r.object]
        name, emb = r.predicate, r.predicate_embedding
        target = adopted.get(r.predicate)
        candidates = by_endpoints.get((subj, obj), ())
        if target is not None:
            name, emb = target, r_embedding[target]
        hit = None
        if candidates:
            if target is not None:
                row = rr[r_pos[target]]
            else:
                row = sims[l_pos[r.predicate]]
            scores = [row[r_pos[right_rels[c].predicate]] for c in candidates]
            k = int(np.argmax(scores))
            if scores[k] >= cfg.theta_relation:
                hit = candidates[k]
        if hit is None:
            appended.append(TemporalRelation(subj, name, obj, r.t_start, r.t_end, r.t_obs, emb))
            continue
        acc = absorbed.setdefault(hit, (set(), set(), set()))
        acc[0].update(r.t_start)
        acc[1].update(r.t_end)
        acc[2].update(r.t_obs)

    relations = []
    for idx, r in enumerate(right_rels):
        if idx in absorbed:
            s, e, o = absorbed[idx]
            r = TemporalRelation(
                r.subject, r.predicate, r.object,
                union_times(r.t_start, s), union_times(r.t_end, e), union_times(r.t_obs, o),
                r.predicate_embedding,
            )
        relations.append(r)
    relations.extend(appended)
    return Tkg.from_parts(entities, relations)


def _merge_pairs(pairs: Sequence[tuple[Tkg, Tkg]], cfg: MergeConfig) -> list[Tkg]:
    return [binary_merge(a, b, cfg) for a, b in pairs]


def _make_pool(cfg: MergeConfig) -> Executor:
    if cfg.executor == "thread":
        return ThreadPoolExecutor(max_workers=cfg.workers)
    return ProcessPoolExecutor(max_workers=cfg.workers)


def _run_round(pairs: list[tuple[Tkg, Tkg]], cfg: MergeConfig, pool: Executor | None) -> list[Tkg]:
    if pool is None or len(pairs) < 2:
        return _merge_pairs(pairs, cfg)
    # a few tasks per worker keeps IPC overhead flat in the wide early rounds
    size = max(1, math.ceil(len(pairs) / (cfg.workers * 4)))
    futures = [pool.submit(_merge_pairs, pairs[i : i + size], cfg) for i in range(0, len(pairs), size)]
    out: list[Tkg] = []
    try:
        for fut in futures:
            out.extend(fut.result())
    except BaseException:
        for fut in futures:
            fut.cancel()
        raise
    return out


def parallel_merge(
    graphs: Sequence[Tkg], cfg: MergeConfig = MergeConfig(), stats: MergeStats | None = None
) -> Tkg:
    """Reduce ``graphs`` by rounds of pairwise merges.

    Each round merges ``(g[2i], g[2i+1])`` concurrently; an odd last graph is
    carried to the next round unchanged. Rounds are separated by a barrier,
    so the result does not depend on the worker count.
    """
    started = time.perf_counter()
    current = list(graphs)
    if not current:
        return EMPTY
    pool = _make_pool(cfg) if cfg.workers > 1 and len(current) > 3 else None
    try:
        while len(current) > 1:
            n = len(current)
            if stats is not None:
                stats.graphs_per_round.append(n)
            pairs = [(current[2 * i], current[2 * i + 1]) for i in range(n // 2)]
            leftover = current[-1] if n % 2 else None
            current = _run_round(pairs, cfg, pool)
            if leftover is not None:
                current.append(leftover)
            if stats is not None:
                stats.rounds += 1
    finally:
        if pool is not None:
            pool.shutdown(wait=True, cancel_futures=True)
    if stats is not None:
        stats.seconds += time.perf_counter() - started
    return current[0]


def update_dtkg(previous: Tkg, snapshot: Tkg, cfg: MergeConfig = MergeConfig()) -> Tkg:
    """Fold a snapshot into the running graph; the running graph is the
    reference side, so its canonical names survive."""
    return binary_merge(snapshot, previous, cfg)
