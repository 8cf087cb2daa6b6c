"""Dual-time graph data model.

Timestamps are integer UNIX seconds (UTC). Validity and observation times are
kept as sorted, duplicate-free tuples ("time lists"); an empty tuple means the
time is unknown.
"""

from __future__ import annotations

import calendar
import re
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from functools import cached_property
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

Timestamp = int
TimeList = tuple[int, ...]
EntityKey = tuple[str, str]

_WS = re.compile(r"\s+")

_MONTHS = {name.lower(): i for i, name in enumerate(calendar.month_name) if name}
_MONTHS.update({name.lower(): i for i, name in enumerate(calendar.month_abbr) if name})
_ISO_DATE = re.compile(r"^(\d{4})-(\d{2})-(\d{2})$")
_DMY_DATE = re.compile(r"^(\d{1,2})-(\d{1,2})-(\d{4})$")
_LONG_DATE = re.compile(r"^([A-Za-z]+)\.?\s+(\d{1,2}),?\s+(\d{4})$")


class InvalidNameError(ValueError):
    """A name or label is empty after normalization."""


def normalize_name(raw: str) -> str:
    """Trim, lowercase and join whitespace runs with underscores."""
    out = _WS.sub("_", raw.strip().lower())
    if not out:
        raise InvalidNameError(f"empty name after normalization: {raw!r}")
    return out


# -- timestamps ---------------------------------------------------------------


def timestamp_from_date(d: date) -> Timestamp:
    return calendar.timegm((d.year, d.month, d.day, 0, 0, 0))


def parse_timestamp(value: str | int | float | date | datetime) -> Timestamp:
    """Parse a UNIX int, an ISO date/datetime, ``DD-MM-YYYY`` or ``June 18, 2024``.

    Date-only values map to 00:00:00 UTC; naive datetimes are read as UTC.
    """
    if isinstance(value, bool):
        raise ValueError(f"not a timestamp: {value!r}")
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"fractional timestamp: {value!r}")
        return int(value)
    if isinstance(value, datetime):
        if value.tzinfo is None:
            value = value.replace(tzinfo=timezone.utc)
        return int(value.timestamp())
    if isinstance(value, date):
        return timestamp_from_date(value)

    text = value.strip()
    if re.fullmatch(r"-?\d+", text):
        return int(text)
    m = _ISO_DATE.match(text)
    if m:
        return timestamp_from_date(date(int(m[1]), int(m[2]), int(m[3])))
    m = _DMY_DATE.match(text)
    if m:
        return timestamp_from_date(date(int(m[3]), int(m[2]), int(m[1])))
    m = _LONG_DATE.match(text)
    if m and m[1].lower() in _MONTHS:
        return timestamp_from_date(date(int(m[3]), _MONTHS[m[1].lower()], int(m[2])))
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        raise ValueError(f"unrecognized date: {value!r}") from None
    return parse_timestamp(dt)


def to_datetime(ts: Timestamp) -> datetime:
    return datetime.fromtimestamp(ts, tz=timezone.utc)


def format_timestamp(ts: Timestamp) -> str:
    """ISO date for midnight timestamps, full ISO-8601 UTC otherwise."""
    dt = to_datetime(ts)
    if (dt.hour, dt.minute, dt.second) == (0, 0, 0):
        return dt.date().isoformat()
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def human_date(ts: Timestamp) -> str:
    """Render as e.g. ``June 18, 2024``."""
    dt = to_datetime(ts)
    return f"{calendar.month_name[dt.month]} {dt.day}, {dt.year}"


def truncate_to_day(ts: Timestamp) -> Timestamp:
    return ts - ts % 86400


# -- time lists ---------------------------------------------------------------


def time_list(values: Iterable[int] = ()) -> TimeList:
    return tuple(sorted({int(v) for v in values}))


def insert_time(times: TimeList, ts: Timestamp) -> TimeList:
    if ts in times:
        return times
    return time_list((*times, ts))


def union_times(*lists: Iterable[int]) -> TimeList:
    merged: set[int] = set()
    for items in lists:
        merged.update(items)
    return tuple(sorted(merged))


# -- graph values -------------------------------------------------------------


def _same_vector(a: np.ndarray | None, b: np.ndarray | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and bool(np.array_equal(a, b))


@dataclass(frozen=True, eq=False)
class Entity:
    name: str
    label: str
    name_embedding: np.ndarray | None = field(default=None, repr=False)
    label_embedding: np.ndarray | None = field(default=None, repr=False)

    @property
    def key(self) -> EntityKey:
        return (self.name, self.label)

    @property
    def has_embeddings(self) -> bool:
        return self.name_embedding is not None and self.label_embedding is not None

    def without_embeddings(self) -> Entity:
        return Entity(self.name, self.label)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Entity):
            return NotImplemented
        return (
            self.key == other.key
            and _same_vector(self.name_embedding, other.name_embedding)
            and _same_vector(self.label_embedding, other.label_embedding)
        )

    def __hash__(self) -> int:
        return hash(self.key)


@dataclass(frozen=True, eq=False)
class TemporalRelation:
    subject: EntityKey
    predicate: str
    object: EntityKey
    t_start: TimeList = ()
    t_end: TimeList = ()
    t_obs: TimeList = ()
    predicate_embedding: np.ndarray | None = field(default=None, repr=False)

    @property
    def identity(self) -> tuple:
        """Full-field identity used for deduplication and ordering."""
        return (self.subject, self.predicate, self.object, self.t_start, self.t_end, self.t_obs)

    @property
    def triple(self) -> tuple[EntityKey, str, EntityKey]:
        return (self.subject, self.predicate, self.object)

    def without_embeddings(self) -> TemporalRelation:
        return TemporalRelation(
            self.subject, self.predicate, self.object, self.t_start, self.t_end, self.t_obs
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TemporalRelation):
            return NotImplemented
        return self.identity == other.identity and _same_vector(
            self.predicate_embedding, other.predicate_embedding
        )

    def __hash__(self) -> int:
        return hash(self.identity)


@dataclass(frozen=True)
class Tkg:
    """A set of entities plus a set of temporal relations.

    The raw constructor stores what it is given; use :meth:`from_parts` to get
    the canonical form (entities sorted by key, relations sorted and
    deduplicated).
    """

    entities: tuple[Entity, ...] = ()
    relations: tuple[TemporalRelation, ...] = ()

    @classmethod
    def from_parts(
        cls, entities: Iterable[Entity], relations: Iterable[TemporalRelation]
    ) -> Tkg:
        by_key: dict[EntityKey, Entity] = {}
        for e in entities:
            by_key.setdefault(e.key, e)
        by_id: dict[tuple, TemporalRelation] = {}
        for r in relations:
            by_id.setdefault(r.identity, r)
        return cls(
            entities=tuple(by_key[k] for k in sorted(by_key)),
            relations=tuple(by_id[i] for i in sorted(by_id)),
        )

    @cached_property
    def index(self) -> Mapping[EntityKey, Entity]:
        return {e.key: e for e in self.entities}

    def entity(self, key: EntityKey) -> Entity:
        return self.index[key]

    def __contains__(self, key: object) -> bool:
        return key in self.index

    def __iter__(self) -> Iterator[TemporalRelation]:
        return iter(self.relations)

    def __len__(self) -> int:
        return len(self.relations)

    def is_empty(self) -> bool:
        return not self.entities and not self.relations

    def without_embeddings(self) -> Tkg:
        return Tkg(
            tuple(e.without_embeddings() for e in self.entities),
            tuple(r.without_embeddings() for r in self.relations),
        )

    def all_timestamps(self) -> set[tuple[str, int]]:
        """Every (kind, timestamp) pair carried by any relation."""
        out: set[tuple[str, int]] = set()
        for r in self.relations:
            out.update(("start", t) for t in r.t_start)
            out.update(("end", t) for t in r.t_end)
            out.update(("obs", t) for t in r.t_obs)
        return out

    def __getstate__(self) -> dict:
        # the cached index is rebuilt on demand
        return {"entities": self.entities, "relations": self.relations}

    def __setstate__(self, state: dict) -> None:
        object.__setattr__(self, "entities", state["entities"])
        object.__setattr__(self, "relations", state["relations"])


EMPTY = Tkg()


# -- validation ---------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    rule: str
    element: object
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.rule}: {self.element!r}" + (f" ({self.detail})" if self.detail else "")


def _is_time_list(values: Sequence[int]) -> bool:
    return all(a < b for a, b in zip(values, values[1:]))


def validate(tkg: Tkg) -> list[Violation]:
    """Return every invariant violation found in ``tkg``; empty means valid."""
    out: list[Violation] = []
    seen: set[EntityKey] = set()
    dims: set[int] = set()
    for e in tkg.entities:
        if not e.name or not e.label:
            out.append(Violation("empty-name", e.key))
        if e.key in seen:
            out.append(Violation("duplicate-entity-key", e.key))
        seen.add(e.key)
        for vec in (e.name_embedding, e.label_embedding):
            if vec is not None:
                dims.add(vec.shape[-1])

    seen_rel: set[tuple] = set()
    for r in tkg.relations:
        for end in (r.subject, r.object):
            if end not in seen:
                out.append(Violation("referential-integrity", r.triple, f"missing endpoint {end!r}"))
        if not r.predicate:
            out.append(Violation("empty-name", r.triple, "empty predicate"))
        if r.identity in seen_rel:
            out.append(Violation("duplicate-relation", r.triple))
        seen_rel.add(r.identity)
        for name in ("t_start", "t_end", "t_obs"):
            if not _is_time_list(getattr(r, name)):
                out.append(Violation("time-list-order", r.triple, name))
        if len(r.t_start) == 1 and len(r.t_end) == 1 and r.t_start[0] > r.t_end[0]:
            out.append(Violation("start-after-end", r.triple))
        if r.predicate_embedding is not None:
            dims.add(r.predicate_embedding.shape[-1])

    if len(dims) > 1:
        out.append(Violation("embedding-dimension", tuple(sorted(dims))))
    return out
