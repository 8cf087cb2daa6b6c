"""Synthetic workloads for tests and benchmarks.

Two kinds:

* clustered graphs: entity and predicate variants drawn around cluster
  centres so that hybrid similarity within a cluster clears the merge
  threshold by a margin and similarity across clusters misses it by the same
  margin. Under such inputs every merge order must produce the same
  cluster-level partition.
* mock corpora: documents written in the mock backend's line grammar, for
  end-to-end pipeline runs without a model.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from .embedding import SimilarityConfig
from .extraction import Document
from .model import Entity, TemporalRelation, Tkg, timestamp_from_date

LABELS = ("person", "organization", "location", "event", "product", "policy")
_BASE_DAY = date(2020, 1, 1)


def day(n: int) -> int:
    """Timestamp of midnight UTC, ``n`` days after 2020-01-01."""
    return timestamp_from_date(_BASE_DAY + timedelta(days=n))


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _centres(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    raw = rng.standard_normal((dim, max(n, 1)))
    if n <= dim:
        q, _ = np.linalg.qr(raw)
        return q[:, :n].T.copy()
    return _unit_rows(raw.T)


def _variants(rng: np.random.Generator, centres: np.ndarray, per: int, spread: float) -> np.ndarray:
    noise = rng.standard_normal((centres.shape[0], per, centres.shape[1])) / np.sqrt(centres.shape[1])
    return _unit_rows((centres[:, None, :] + spread * noise).reshape(-1, centres.shape[1]))


def _separated(sims: np.ndarray, clusters: np.ndarray, theta: float, margin: float) -> bool:
    same = clusters[:, None] == clusters[None, :]
    off = ~np.eye(len(clusters), dtype=bool)
    within = sims[same & off]
    across = sims[~same]
    return (within.size == 0 or within.min() >= theta + margin) and (
        across.size == 0 or across.max() <= theta - margin
    )


@dataclass(frozen=True)
class ClusterSpace:
    """Entity and predicate variants with known cluster membership."""

    entity_names: tuple[tuple[str, ...], ...]
    entity_labels: tuple[str, ...]
    name_vectors: dict[str, np.ndarray]
    label_vectors: dict[str, np.ndarray]
    predicate_names: tuple[tuple[str, ...], ...]
    predicate_vectors: dict[str, np.ndarray]

    @property
    def entity_cluster(self) -> dict[str, int]:
        return {n: c for c, names in enumerate(self.entity_names) for n in names}

    @property
    def predicate_cluster(self) -> dict[str, int]:
        return {n: c for c, names in enumerate(self.predicate_names) for n in names}

    def entity(self, cluster: int, variant: int) -> Entity:
        name = self.entity_names[cluster][variant]
        label = self.entity_labels[cluster]
        return Entity(name, label, self.name_vectors[name], self.label_vectors[label])


def cluster_space(
    rng: np.random.Generator,
    entity_clusters: int = 6,
    predicate_clusters: int = 4,
    variants: int = 3,
    dim: int = 64,
    margin: float = 0.05,
    cfg: SimilarityConfig = SimilarityConfig(),
    spread: float = 0.35,
    max_tries: int = 50,
) -> ClusterSpace:
    """Draw variants until hybrid entity similarity and predicate similarity
    are separated by ``margin`` around their thresholds."""
    labels = _unit_rows(_centres(rng, len(LABELS), dim).astype(np.float64))
    label_vectors = {l: labels[i].astype(np.float32) for i, l in enumerate(LABELS)}
    entity_labels = tuple(LABELS[int(i)] for i in rng.integers(0, len(LABELS), entity_clusters))
    e_cluster = np.repeat(np.arange(entity_clusters), variants)
    p_cluster = np.repeat(np.arange(predicate_clusters), variants)
    for _ in range(max_tries):
        names = _variants(rng, _centres(rng, entity_clusters, dim), variants, spread).astype(np.float32)
        preds = _variants(rng, _centres(rng, predicate_clusters, dim), variants, spread).astype(np.float32)
        hyb = _unit_rows(
            cfg.lam * names.astype(np.float64)
            + cfg.beta * np.asarray([label_vectors[entity_labels[c]] for c in e_cluster], dtype=np.float64)
        )
        p = _unit_rows(preds.astype(np.float64))
        if _separated(hyb @ hyb.T, e_cluster, cfg.theta_entity, margin) and _separated(
            p @ p.T, p_cluster, cfg.theta_relation, margin
        ):
            break
    else:
        raise RuntimeError("could not draw separated clusters; lower the spread")
    entity_names = tuple(tuple(f"e{c}_v{v}" for v in range(variants)) for c in range(entity_clusters))
    predicate_names = tuple(tuple(f"p{c}_v{v}" for v in range(variants)) for c in range(predicate_clusters))
    flat_e = [n for group in entity_names for n in group]
    flat_p = [n for group in predicate_names for n in group]
    return ClusterSpace(
        entity_names,
        entity_labels,
        {n: names[i] for i, n in enumerate(flat_e)},
        label_vectors,
        predicate_names,
        {n: preds[i] for i, n in enumerate(flat_p)},
    )


def random_graph(
    rng: np.random.Generator,
    space: ClusterSpace,
    max_relations: int = 4,
    observed_at: int | None = None,
    time_pool: int = 6,
) -> Tkg:
    """One graph holding at most one variant per entity and predicate cluster
    and at most one relation per cluster triple. Every start day precedes
    every end day."""
    n_e = len(space.entity_names)
    n_p = len(space.predicate_names)
    e_variant = {c: int(rng.integers(len(space.entity_names[c]))) for c in range(n_e)}
    p_variant = {c: int(rng.integers(len(space.predicate_names[c]))) for c in range(n_p)}
    obs = observed_at if observed_at is not None else day(100 + int(rng.integers(0, 30)))
    triples: set[tuple[int, int, int]] = set()
    for _ in range(int(rng.integers(1, max_relations + 1))):
        s, o = (int(x) for x in rng.choice(n_e, 2, replace=False))
        triples.add((s, int(rng.integers(n_p)), o))
    entities: dict[int, Entity] = {}
    relations = []
    for s, p, o in sorted(triples):
        es = entities.setdefault(s, space.entity(s, e_variant[s]))
        eo = entities.setdefault(o, space.entity(o, e_variant[o]))
        pname = space.predicate_names[p][p_variant[p]]
        starts = [day(int(d)) for d in rng.choice(time_pool, int(rng.integers(0, 3)), replace=False)]
        ends = [day(time_pool + int(d)) for d in rng.choice(time_pool, int(rng.integers(0, 3)), replace=False)]
        relations.append(
            TemporalRelation(es.key, pname, eo.key, tuple(sorted(starts)), tuple(sorted(ends)), (obs,),
                             space.predicate_vectors[pname])
        )
    return Tkg.from_parts(entities.values(), relations)


def random_graphs(
    rng: np.random.Generator, space: ClusterSpace, n: int, max_relations: int = 4
) -> list[Tkg]:
    return [random_graph(rng, space, max_relations) for _ in range(n)]


def partition(tkg: Tkg, space: ClusterSpace) -> tuple[frozenset, frozenset]:
    """Cluster-level view of a graph: which entity clusters are present and
    which (subject cluster, predicate cluster, object cluster, times)
    relations exist. Independent of which variant names survived."""
    ec, pc = space.entity_cluster, space.predicate_cluster
    entities = frozenset((ec[e.name], e.label) for e in tkg.entities)
    relations = frozenset(
        (ec[r.subject[0]], pc[r.predicate], ec[r.object[0]], r.t_start, r.t_end, r.t_obs)
        for r in tkg.relations
    )
    return entities, relations


def performance_graphs(
    n: int = 4223, seed: int = 0, entity_clusters: int = 400, predicate_clusters: int = 60, dim: int = 256
) -> list[Tkg]:
    """A batch shaped like a large news day: ``n`` atomic graphs of about two
    relations each over a few hundred entity clusters."""
    rng = np.random.default_rng(seed)
    space = cluster_space(rng, entity_clusters, predicate_clusters, variants=3, dim=dim, spread=0.3)
    return [random_graph(rng, space, max_relations=3) for _ in range(n)]


# -- mock corpora -------------------------------------------------------------

PEOPLE = ("Alice Moreau", "Bruno Diaz", "Chen Wei", "Dana Kowalski", "Emeka Obi", "Farah Haddad")
ORGS = ("Acme Corp", "Globex", "Initech", "Umbrella Health", "Stark Labs", "Wayne Foods")
PREDICATES = ("owns", "possesses", "has", "works_for", "advises", "funds", "sued")


def grammar_fact(rng: np.random.Generator, start_day: int) -> str:
    s = PEOPLE[int(rng.integers(len(PEOPLE)))]
    o = ORGS[int(rng.integers(len(ORGS)))]
    p = PREDICATES[int(rng.integers(len(PREDICATES)))]
    fields = [f"{s} (person)", p, f"{o} (organization)"]
    kind = int(rng.integers(4))
    if kind in (1, 3):
        fields.append(f"start={(_BASE_DAY + timedelta(days=start_day)).isoformat()}")
    if kind in (2, 3):
        fields.append(f"end={(_BASE_DAY + timedelta(days=start_day + 30 + int(rng.integers(0, 60)))).isoformat()}")
    return " | ".join(fields) + "."


def mock_corpus(
    rng: np.random.Generator, n_docs: int = 12, n_days: int = 4, facts_per_doc: tuple[int, int] = (1, 4)
) -> list[Document]:
    """Documents in the mock extraction grammar spread over ``n_days``
    observation days."""
    docs = []
    for i in range(n_docs):
        obs_day = int(rng.integers(0, n_days))
        k = int(rng.integers(facts_per_doc[0], facts_per_doc[1] + 1))
        text = " ".join(grammar_fact(rng, int(rng.integers(0, 60))) for _ in range(k))
        docs.append(Document(f"doc-{i:04d}", text, day(90 + obs_day)))
    return docs


def scaling_corpus(n_facts: int, seed: int = 0, n_days: int = 4) -> list[Document]:
    """Roughly ``n_facts`` grammar facts, four per document."""
    rng = np.random.default_rng(seed)
    docs = []
    for i in range((n_facts + 3) // 4):
        k = min(4, n_facts - 4 * i)
        text = " ".join(grammar_fact(rng, int(rng.integers(0, 60))) for _ in range(k))
        docs.append(Document(f"doc-{i:05d}", text, day(90 + i % n_days)))
    return docs
