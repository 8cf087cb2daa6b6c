from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dtkg.embedding import Embedder, MockEmbedder
from dtkg.evaluation import (
    Counts,
    GoldAnnotation,
    Quintuple,
    classify,
    count_facts_with_validity,
    evaluate,
    pairwise_scores,
    quintuples_from_tkg,
    rates,
    stability,
)
from dtkg.model import EMPTY, parse_timestamp
from dtkg.storage import load_graph
from helpers import GOLDEN, graph, relation

Q = Quintuple.make
JAN24, JAN27 = parse_timestamp("2020-01-24"), parse_timestamp("2020-01-27")


class TableProvider:
    """Embeds rendered tuples through a fixed lookup table."""

    provider_id = "table"
    model_id = "table-v1"

    def __init__(self, table):
        self.table = table

    def embed_texts(self, texts):
        return np.asarray([self.table[t] for t in texts], dtype=np.float64)


@st.composite
def count_vectors(draw):
    match = draw(st.integers(0, 10_000))
    match_t = draw(st.integers(0, match))
    om_t = draw(st.integers(0, match - match_t))
    return Counts(match, draw(st.integers(0, 10_000)), draw(st.integers(0, 10_000)),
                  match_t, om_t, match - match_t - om_t)


def test_identical_sets_all_match():
    gold = [Q("a", "p", "b", ["2020-01-01"]), Q("c", "q", "d")]
    c = classify(gold, gold).counts
    assert c == Counts(2, 0, 0, 2, 0, 0)


def test_missing_gold_tuple_is_omission():
    gold = [Q("a", "p", "b"), Q("c", "q", "d")]
    cls = classify(gold[:1], gold)
    assert cls.om == (("c", "q", "d"),) and cls.counts.match == 1


def test_death_toll_without_times_is_temporal_omission():
    gold = [Q("coronavirus", "killed_people_in", "china", [], ["2020-01-24"])]
    extracted = [Q("coronavirus", "killed_people_in", "china")]
    c = classify(extracted, gold).counts
    assert (c.match, c.match_t, c.om_t, c.hall_t) == (1, 0, 1, 0)


def test_wrong_time_is_temporal_hallucination():
    gold = [Q("a", "p", "b", ["2020-01-01"])]
    c = classify([Q("a", "p", "b", ["2020-01-01", "2020-02-01"])], gold).counts
    assert (c.match_t, c.om_t, c.hall_t) == (0, 0, 1)


def test_times_pool_per_triple():
    gold = [Q("v", "killed_people_in", "c", [], ["2020-01-24", "2020-01-27"])]
    extracted = [Q("v", "killed_people_in", "c", [], ["2020-01-24"]),
                 Q("v", "killed_people_in", "c", [], ["2020-01-27"])]
    assert classify(extracted, gold).counts == Counts(1, 0, 0, 1, 0, 0)


@given(st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from("pq"), st.sampled_from("xy"),
                          st.lists(st.integers(0, 3), max_size=2)), max_size=8),
       st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from("pq"), st.sampled_from("xy"),
                          st.lists(st.integers(0, 3), max_size=2)), max_size=8))
def test_swapping_sides_swaps_om_and_hall(xs, gs):
    ext = [Q(s, p, o, t) for s, p, o, t in xs]
    gold = [Q(s, p, o, t) for s, p, o, t in gs]
    a, b = classify(ext, gold).counts, classify(gold, ext).counts
    assert (a.match, a.om, a.hall) == (b.match, b.hall, b.om)
    assert a.match_t == b.match_t


def test_similarity_fallback_is_opt_in():
    gold = [Q("alice", "owns", "acme")]
    extracted = [Q("alice", "owns", "acme_corp")]
    assert classify(extracted, gold).counts.match == 0

    class Same:
        provider_id, model_id = "same", "same"

        def embed_texts(self, texts):
            return np.ones((len(texts), 4))

    cls = classify(extracted, gold, Embedder(Same()))
    assert cls.counts.match == 1 and cls.similarity_matches == 1
    assert cls.match == (("alice", "owns", "acme"),)


def test_rates_examples():
    r = rates(Counts(3, 1, 0, 3, 0, 0))
    assert (r.r_match, r.r_om) == (0.75, 0.25)
    r = rates(Counts(4, 0, 4, 2, 1, 1))
    assert (r.r_match, r.r_om, r.r_hall) == (1.0, 0.0, 0.5)
    assert r.r_hall_t == pytest.approx(0.25, abs=1e-12)


def test_rates_zero_denominators_are_flagged():
    r = rates(Counts(0, 0, 0, 0, 0, 0))
    assert (r.r_match, r.r_om, r.r_hall, r.r_match_t, r.r_om_t, r.r_hall_t) == (1, 0, 0, 1, 0, 0)
    assert set(r.undefined) == {"r_match", "r_om", "r_hall", "r_match_t", "r_om_t"}


def test_counts_must_partition():
    with pytest.raises(ValueError):
        Counts(3, 0, 0, 1, 1, 0)
    with pytest.raises(ValueError):
        Counts(-1, 0, 0, 0, 0, -1)


@given(count_vectors())
def test_rate_identities(c):
    r = rates(c)
    assert abs(r.r_match + r.r_om - 1.0) <= 1e-12
    assert abs(r.r_match_t + r.r_om_t + r.r_hall_t - r.r_match) <= 1e-12
    for v in (r.r_match, r.r_om, r.r_hall, r.r_match_t, r.r_om_t):
        assert 0.0 <= v <= 1.0
    assert r.r_hall_t >= -1e-12


def test_sample_rate_column_satisfies_identity():
    assert abs(0.720 - 0.354 - 0.366) < 1e-12


def test_stability_toy_cases():
    t1, t2, t3 = Q("a", "p", "b"), Q("c", "q", "d"), Q("e", "r", "f")
    e = np.eye(3)
    emb = Embedder(TableProvider({t1.render(): e[0], t2.render(): e[1], t3.render(): e[2]}))
    assert stability([t1, t2], [t1, t2, t2], emb) == pytest.approx(3 / math.sqrt(10), abs=1e-9)
    assert stability([t1, t2, t3], [t1, t2], emb) == pytest.approx(math.sqrt(2 / 3), abs=1e-9)
    assert stability([t1], [t1], emb) == pytest.approx(1.0, abs=1e-9)


def test_stability_rejects_empty_run():
    with pytest.raises(ValueError):
        stability([], [Q("a", "p", "b")], Embedder(MockEmbedder()))


def test_render_is_canonical():
    q = Q("Real Madrid", "won", "Champions League final", ["2024-06-18"], [])
    assert q.render() == "real_madrid won champions_league_final start=[2024-06-18] end=[]"


def test_pairwise_scores_perfect_and_spurious_merge():
    gold = {"a": "1", "b": "1", "c": "2", "d": "3"}
    assert pairwise_scores(gold, gold).f1 == 1.0
    s = pairwise_scores({"a": "1", "b": "1", "c": "2", "d": "2"}, gold)
    assert (s.precision, s.recall) == (0.5, 1.0)
    assert s.f1 == pytest.approx(2 / 3)


def test_pairwise_zero_f1_and_unlabeled():
    s = pairwise_scores({"a": "x", "b": "x"}, {"a": "1", "b": "2", "c": "3", "d": "3"})
    assert (s.precision, s.recall, s.f1) == (0.0, 1.0, 0.0)
    s = pairwise_scores({"a": "x", "b": "x", "c": "y", "d": "z"}, {"a": "1", "b": "2", "c": "3", "d": "3"})
    assert (s.precision, s.recall, s.f1) == (0.0, 0.0, 0.0)
    with pytest.raises(KeyError):
        pairwise_scores({"zz": "1"}, {"a": "1"})


def test_count_facts_with_validity():
    with_t = graph(relation("john_doe", "is_ceo", "x", end=(1,)))
    without = graph(relation("a", "p", "b"))
    assert count_facts_with_validity([without, without]) == (0, 2)
    assert count_facts_with_validity([with_t, without, EMPTY]) == (1, 2)


def test_toy_report():
    predicted = load_graph(GOLDEN / "v1_graph.json")
    gold = GoldAnnotation.load(GOLDEN / "toy_gold.jsonl")
    report = evaluate(predicted, gold, Embedder(MockEmbedder()))
    # "possesses" vs gold "owns" is a factual miss; the death toll lacks one end date
    assert report.counts == Counts(4, 1, 1, 3, 1, 0)
    assert report.rates.r_match == pytest.approx(0.8)
    assert report.resolution.entity.f1 == 1.0
    # every "own" synonym resolves to the surviving "possesses" relation
    assert report.resolution.relation.f1 == 1.0
    d = report.as_dict()
    assert d["matcher"] == "exact" and d["rates"]["undefined"] == []


def test_report_for_perfect_prediction():
    predicted = load_graph(GOLDEN / "v1_graph.json")
    gold = GoldAnnotation(tuple(quintuples_from_tkg(predicted)), {}, {})
    report = evaluate(predicted, gold)
    assert report.rates.r_match == 1.0 and report.rates.r_hall == 0.0 and report.rates.r_match_t == 1.0
    assert report.resolution is None
