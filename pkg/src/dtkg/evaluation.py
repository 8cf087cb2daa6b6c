"""Extraction quality metrics.

Factual classification compares (subject, predicate, object) triples; among
factual matches the validity lists decide the temporal class:

* ``MATCH_t``: start and end lists equal the gold lists;
* ``OM_t``: every extracted time is in the gold lists but some gold time is
  missing;
* ``HALL_t``: some extracted time does not appear in the gold lists.

So ``|MATCH_t| + |OM_t| + |HALL_t| = |MATCH|`` by construction.
"""

from __future__ import annotations

import itertools
import json
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embedding import Embedder, SimilarityConfig, cosine
from .model import Tkg, format_timestamp, normalize_name, parse_timestamp, time_list, union_times

SIMILARITY_FALLBACK = 0.9


@dataclass(frozen=True, order=True)
class Quintuple:
    subject: str
    predicate: str
    object: str
    t_start: tuple[int, ...] = ()
    t_end: tuple[int, ...] = ()

    @classmethod
    def make(cls, subject: str, predicate: str, obj: str, t_start=(), t_end=()) -> Quintuple:
        return cls(
            normalize_name(subject),
            normalize_name(predicate),
            normalize_name(obj),
            time_list(parse_timestamp(t) for t in t_start),
            time_list(parse_timestamp(t) for t in t_end),
        )

    @property
    def triple(self) -> tuple[str, str, str]:
        return self.subject, self.predicate, self.object

    def render(self) -> str:
        start = ",".join(format_timestamp(t) for t in self.t_start)
        end = ",".join(format_timestamp(t) for t in self.t_end)
        return f"{self.subject} {self.predicate} {self.object} start=[{start}] end=[{end}]"


def quintuples_from_tkg(tkg: Tkg) -> list[Quintuple]:
    """Entity names only: labels are not part of the compared tuple."""
    return sorted(
        Quintuple(r.subject[0], r.predicate, r.object[0], r.t_start, r.t_end) for r in tkg.relations
    )


@dataclass(frozen=True)
class GoldAnnotation:
    tuples: tuple[Quintuple, ...]
    entity_clusters: Mapping[str, str]
    relation_clusters: Mapping[str, str]

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> GoldAnnotation:
        tuples: set[Quintuple] = set()
        ents: dict[str, str] = {}
        rels: dict[str, str] = {}
        for rec in records:
            for t in rec.get("gold_tuples", ()):
                tuples.add(Quintuple.make(t["subject"], t["predicate"], t["object"],
                                          t.get("t_start", ()), t.get("t_end", ())))
            for mention, cluster in rec.get("entity_clusters", {}).items():
                ents[normalize_name(mention)] = str(cluster)
            for mention, cluster in rec.get("relation_clusters", {}).items():
                rels[normalize_name(mention)] = str(cluster)
        return cls(tuple(sorted(tuples)), ents, rels)

    @classmethod
    def load(cls, path: str | os.PathLike) -> GoldAnnotation:
        with open(path, encoding="utf-8") as fh:
            return cls.from_records(json.loads(line) for line in fh if line.strip())


@dataclass(frozen=True)
class Counts:
    match: int
    om: int
    hall: int
    match_t: int
    om_t: int
    hall_t: int

    def __post_init__(self) -> None:
        if min(asdict(self).values()) < 0:
            raise ValueError("counts must be non-negative")
        if self.match_t + self.om_t + self.hall_t != self.match:
            raise ValueError("temporal classes must partition the factual matches")


@dataclass(frozen=True)
class Classification:
    match: tuple[tuple[str, str, str], ...]
    om: tuple[tuple[str, str, str], ...]
    hall: tuple[tuple[str, str, str], ...]
    match_t: tuple[tuple[str, str, str], ...]
    om_t: tuple[tuple[str, str, str], ...]
    hall_t: tuple[tuple[str, str, str], ...]
    similarity_matches: int = 0

    @property
    def counts(self) -> Counts:
        return Counts(len(self.match), len(self.om), len(self.hall),
                      len(self.match_t), len(self.om_t), len(self.hall_t))


def _by_triple(tuples: Iterable[Quintuple]) -> dict[tuple[str, str, str], tuple[tuple[int, ...], tuple[int, ...]]]:
    start: dict[tuple, tuple[int, ...]] = defaultdict(tuple)
    end: dict[tuple, tuple[int, ...]] = defaultdict(tuple)
    for q in tuples:
        start[q.triple] = union_times(start[q.triple], q.t_start)
        end[q.triple] = union_times(end[q.triple], q.t_end)
    return {k: (start[k], end[k]) for k in start}


def _temporal_class(extracted, gold) -> str:
    if extracted == gold:
        return "match_t"
    (es, ee), (gs, ge) = extracted, gold
    if set(es) <= set(gs) and set(ee) <= set(ge):
        return "om_t"
    return "hall_t"


def _similar_pairs(
    gold_left: list[tuple], extracted_left: list[tuple], embedder: Embedder, threshold: float
) -> list[tuple[tuple, tuple]]:
    if not gold_left or not extracted_left:
        return []
    vecs = embedder.embed([" ".join(t) for t in gold_left] + [" ".join(t) for t in extracted_left])
    g = np.asarray(vecs[: len(gold_left)], dtype=np.float64)
    x = np.asarray(vecs[len(gold_left):], dtype=np.float64)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    sims = g @ x.T
    candidates = sorted(
        ((sims[i, j], i, j) for i in range(len(gold_left)) for j in range(len(extracted_left))
         if sims[i, j] >= threshold),
        key=lambda c: (-c[0], c[1], c[2]),
    )
    used_g, used_x, pairs = set(), set(), []
    for _, i, j in candidates:
        if i not in used_g and j not in used_x:
            used_g.add(i)
            used_x.add(j)
            pairs.append((gold_left[i], extracted_left[j]))
    return pairs


def classify(
    extracted: Iterable[Quintuple],
    gold: Iterable[Quintuple],
    embedder: Embedder | None = None,
    threshold: float = SIMILARITY_FALLBACK,
) -> Classification:
    """Classify extracted tuples against gold tuples.

    Times are pooled per triple on each side before comparison. Matching is
    exact on normalized triples; with an ``embedder`` the leftover gold and
    extracted triples are also paired one-to-one, best first, when their
    rendered texts reach ``threshold`` cosine similarity.
    """
    ext = _by_triple(extracted)
    gld = _by_triple(gold)
    pairs = [(t, t) for t in sorted(gld) if t in ext]
    n_similar = 0
    if embedder is not None:
        matched = {t for t, _ in pairs}
        extra = _similar_pairs(
            [t for t in sorted(gld) if t not in matched],
            [t for t in sorted(ext) if t not in matched],
            embedder,
            threshold,
        )
        n_similar = len(extra)
        pairs.extend(extra)
    matched_gold = {g for g, _ in pairs}
    matched_ext = {x for _, x in pairs}
    temporal: dict[str, list] = {"match_t": [], "om_t": [], "hall_t": []}
    for g, x in pairs:
        temporal[_temporal_class(ext[x], gld[g])].append(g)
    return Classification(
        match=tuple(sorted(matched_gold)),
        om=tuple(t for t in sorted(gld) if t not in matched_gold),
        hall=tuple(t for t in sorted(ext) if t not in matched_ext),
        match_t=tuple(sorted(temporal["match_t"])),
        om_t=tuple(sorted(temporal["om_t"])),
        hall_t=tuple(sorted(temporal["hall_t"])),
        similarity_matches=n_similar,
    )


@dataclass(frozen=True)
class Rates:
    r_match: float
    r_om: float
    r_hall: float
    r_match_t: float
    r_om_t: float
    r_hall_t: float
    undefined: tuple[str, ...] = ()


def rates(counts: Counts) -> Rates:
    """The six rates. A zero denominator yields 1 for match-type rates and 0
    for omission/hallucination rates, and the rate is listed in
    ``undefined``."""
    undefined: list[str] = []
    recall_den = counts.match + counts.om
    hall_den = counts.match + counts.hall

    def ratio(num: int, den: int, name: str, empty: float) -> float:
        if den == 0:
            undefined.append(name)
            return empty
        return num / den

    r_match = ratio(counts.match, recall_den, "r_match", 1.0)
    r_om = ratio(counts.om, recall_den, "r_om", 0.0)
    r_hall = ratio(counts.hall, hall_den, "r_hall", 0.0)
    r_match_t = ratio(counts.match_t, recall_den, "r_match_t", 1.0)
    r_om_t = ratio(counts.om_t, recall_den, "r_om_t", 0.0)
    return Rates(r_match, r_om, r_hall, r_match_t, r_om_t, r_match - r_match_t - r_om_t, tuple(undefined))


# -- stability ----------------------------------------------------------------


def centroid(tuples: Sequence[Quintuple], embedder: Embedder) -> np.ndarray:
    if len(tuples) == 0:
        raise ValueError("cannot take the centroid of an empty run")
    vecs = embedder.embed([q.render() for q in tuples])
    return np.mean(np.asarray(vecs, dtype=np.float64), axis=0)


def stability(run_base: Sequence[Quintuple], run_r: Sequence[Quintuple], embedder: Embedder) -> float:
    """Cosine between the mean tuple embeddings of two runs. Runs are
    sequences, so a tuple repeated in a run weighs more in its centroid."""
    return cosine(centroid(run_base, embedder), centroid(run_r, embedder))


# -- entity / relation resolution ---------------------------------------------


@dataclass(frozen=True)
class PairwiseScores:
    precision: float
    recall: float
    f1: float
    true_pairs: int = 0
    predicted_pairs: int = 0
    gold_pairs: int = 0


def _pairs(clusters: Mapping[str, str], mentions: Sequence[str]) -> set[tuple[str, str]]:
    return {(a, b) for a, b in itertools.combinations(mentions, 2) if clusters[a] == clusters[b]}


def pairwise_scores(predicted: Mapping[str, str], gold: Mapping[str, str]) -> PairwiseScores:
    """Pairwise cluster precision/recall/F1 over the mentions of ``predicted``.

    A pair is a true positive when both clusterings put it together. With no
    predicted (gold) pairs the precision (recall) is 1.
    """
    unlabeled = sorted(set(predicted) - set(gold))
    if unlabeled:
        raise KeyError(f"mentions without gold cluster labels: {unlabeled[:5]}")
    mentions = sorted(predicted)
    pred = _pairs(predicted, mentions)
    true = _pairs(gold, mentions)
    tp = len(pred & true)
    p = tp / len(pred) if pred else 1.0
    r = tp / len(true) if true else 1.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return PairwiseScores(p, r, f1, tp, len(pred), len(true))


def _assign(
    mentions: Sequence[str],
    targets: Sequence[str],
    target_vectors: np.ndarray | None,
    embedder: Embedder | None,
    theta: float,
) -> dict[str, str]:
    out: dict[str, str] = {}
    exact = set(targets)
    pending = [m for m in mentions if m not in exact]
    for m in mentions:
        if m in exact:
            out[m] = m
    if pending and embedder is not None and target_vectors is not None and len(targets):
        vecs = np.asarray(embedder.embed(pending), dtype=np.float64)
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        sims = vecs @ target_vectors.T
        for m, row in zip(pending, sims):
            j = int(np.argmax(row))
            out[m] = targets[j] if row[j] >= theta else m
    else:
        out.update({m: m for m in pending})
    return out


def _unit_matrix(vectors: Sequence[np.ndarray | None]) -> np.ndarray | None:
    if not vectors or any(v is None for v in vectors):
        return None
    m = np.asarray(vectors, dtype=np.float64)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


@dataclass(frozen=True)
class ResolutionScores:
    entity: PairwiseScores
    relation: PairwiseScores


def er_rr_scores(
    predicted: Tkg,
    gold: GoldAnnotation,
    embedder: Embedder | None = None,
    cfg: SimilarityConfig = SimilarityConfig(),
) -> ResolutionScores:
    """Entity- and relation-resolution quality of a merged graph.

    Each gold mention is placed in the predicted cluster it resolves to: an
    entity (or predicate) of the same normalized name, else, given an
    embedder, the most similar one by name embedding when it reaches the
    entity (relation) threshold. Unresolved mentions are singletons.
    """
    ent_names = sorted({e.name for e in predicted.entities})
    first_vec: dict[str, np.ndarray | None] = {}
    for e in predicted.entities:
        first_vec.setdefault(e.name, e.name_embedding)
    ent_cluster = _assign(
        sorted(gold.entity_clusters), ent_names,
        _unit_matrix([first_vec[n] for n in ent_names]), embedder, cfg.theta_entity,
    )
    preds: dict[str, np.ndarray | None] = {}
    for r in predicted.relations:
        preds.setdefault(r.predicate, r.predicate_embedding)
    pred_names = sorted(preds)
    rel_cluster = _assign(
        sorted(gold.relation_clusters), pred_names,
        _unit_matrix([preds[n] for n in pred_names]), embedder, cfg.theta_relation,
    )
    return ResolutionScores(
        pairwise_scores(ent_cluster, gold.entity_clusters),
        pairwise_scores(rel_cluster, gold.relation_clusters),
    )


def count_facts_with_validity(atomic_graphs: Iterable[Tkg]) -> tuple[int, int]:
    """(with, without): a fact counts as "with" when any of its relations
    carries a start or end time."""
    with_v = without = 0
    for g in atomic_graphs:
        if any(r.t_start or r.t_end for r in g.relations):
            with_v += 1
        else:
            without += 1
    return with_v, without


# -- report -------------------------------------------------------------------


@dataclass
class EvaluationReport:
    counts: Counts
    rates: Rates
    matcher: str = "exact"
    similarity_matches: int = 0
    stability: list[float] = field(default_factory=list)
    resolution: ResolutionScores | None = None
    config: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {
            "counts": asdict(self.counts),
            "rates": asdict(self.rates),
            "matcher": self.matcher,
            "similarity_matches": self.similarity_matches,
            "stability": list(self.stability),
            "config": dict(self.config),
        }
        out["rates"]["undefined"] = list(self.rates.undefined)
        if self.resolution is not None:
            out["entity_resolution"] = asdict(self.resolution.entity)
            out["relation_resolution"] = asdict(self.resolution.relation)
        return out


def evaluate(
    predicted: Tkg,
    gold: GoldAnnotation,
    embedder: Embedder | None = None,
    similarity_fallback: bool = False,
    runs: Sequence[Sequence[Quintuple]] = (),
    cfg: SimilarityConfig = SimilarityConfig(),
) -> EvaluationReport:
    """Full report for one predicted graph. ``runs`` are extra extraction
    runs scored for stability against the predicted tuples."""
    extracted = quintuples_from_tkg(predicted)
    cls = classify(extracted, gold.tuples, embedder if similarity_fallback else None)
    report = EvaluationReport(
        counts=cls.counts,
        rates=rates(cls.counts),
        matcher="similarity" if similarity_fallback else "exact",
        similarity_matches=cls.similarity_matches,
        config={"theta_entity": cfg.theta_entity, "theta_relation": cfg.theta_relation,
                "similarity_threshold": SIMILARITY_FALLBACK},
    )
    if runs and embedder is not None:
        report.stability = [stability(extracted, run, embedder) for run in runs]
    if gold.entity_clusters or gold.relation_clusters:
        report.resolution = er_rr_scores(predicted, gold, embedder, cfg)
    return report
