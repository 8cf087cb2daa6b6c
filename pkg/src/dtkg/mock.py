"""Deterministic offline completion backend.

Decomposition requests: the text is split into sentences; a small table maps
known multi-fact sentences to their facts, relative time expressions are
rewritten against the observation date, and anything else is echoed as one
fact.

Extraction requests understand a line grammar::

    Subject (label) | predicate | Object (label) | start=YYYY-MM-DD | end=YYYY-MM-DD

where labels, ``start=`` and ``end=`` are optional, several dates may be
comma-separated, and several tuples may be joined with `` ; ``. A handful of
regular-expression rules cover the worked examples (end actions, death
tolls, protest weeks). Everything else gets the refusal string.
"""

from __future__ import annotations

import calendar
import json
import re
from datetime import date, timedelta
from typing import Callable

from .extraction import RETRY_MARKER, split_sentences
from .llm import CompletionRequest
from .model import parse_timestamp, to_datetime

REFUSAL = "I'm sorry, but I can't help with that request."
DEFAULT_LABEL = "entity"

DECOMPOSE_TASK = "### task: atomic_fact_decomposition"
EXTRACT_TASK = "### task: quintuple_extraction"

_OBS = re.compile(r"^Observation time: .*\((\d{4}-\d{2}-\d{2})[^)]*\)\s*$", re.M)
_SECTION = re.compile(r"^(?:Text|Fact):\n", re.M)
_ENTITY = re.compile(r"^(?P<name>.+?)\s*\((?P<label>[^()]+)\)$")

DECOMPOSITION_TABLE: dict[str, tuple[str, ...]] = {
    "On June 18, 2024, Real Madrid won the Champions League final with a 2-1 victory.": (
        "Real Madrid won the Champions League final match on June 18, 2024.",
        "The Champions League final match ended with a 2-1 victory for Real Madrid on June 18, 2024.",
    ),
    "Following the triumph, fans of Real Madrid celebrated the Champions League victory across the city.": (
        "Fans of Real Madrid celebrated the Champions League final match victory across the city on June 18, 2024.",
    ),
}


def _q(s, sl, p, o, ol, start=(), end=()) -> dict:
    return {
        "subject": s, "subject_label": sl, "predicate": p, "object": o, "object_label": ol,
        "t_start": list(start), "t_end": list(end),
    }


def _iso(text: str) -> str:
    return to_datetime(parse_timestamp(text.strip())).date().isoformat()


def _end_action(m: re.Match) -> list[dict]:
    role = m["role"].strip().lower().replace(" ", "_")
    return [_q(m["s"], "person", f"is_{role}", m["o"], "organization", end=[_iso(m["date"])])]


def _start_action(m: re.Match) -> list[dict]:
    role = m["role"].strip().lower().replace(" ", "_")
    return [_q(m["s"], "person", f"is_{role}", m["o"], "organization", start=[_iso(m["date"])])]


def _death_toll(m: re.Match) -> list[dict]:
    return [_q(m["s"], "disease", "killed_people_in", m["o"], "location", end=[_iso(m["date"])])]


def _protest_week(m: re.Match) -> list[dict]:
    first = date.fromisoformat(_iso(m["date"]))
    last = first + timedelta(days=6)
    return [
        _q(m["s"], "group", f"{m['verb'].lower()}_against", m["o"], "policy",
           start=[first.isoformat()], end=[last.isoformat()])
    ]


EXTRACTION_RULES: tuple[tuple[re.Pattern, Callable[[re.Match], list[dict]]], ...] = (
    (re.compile(r"^(?P<s>.+?) is no longer the (?P<role>[\w -]+?) of (?P<o>.+?) (?:on|as of) (?P<date>.+)$"),
     _end_action),
    (re.compile(r"^(?P<s>.+?) (?:became|was appointed|was named) (?:the )?(?P<role>[\w -]+?) of (?P<o>.+?) on (?P<date>.+)$"),
     _start_action),
    (re.compile(r"^By (?P<date>[A-Za-z]+ \d{1,2}, \d{4}), (?:the )?(?P<s>.+?) had killed (?:at least )?\d[\d,]* people in (?P<o>.+)$"),
     _death_toll),
    (re.compile(r"^(?P<s>.+?) (?P<verb>protested|demonstrated|rallied) against (?P<o>.+?) (?:in|during) the week of (?P<date>.+)$"),
     _protest_week),
)

EXTRACTION_TABLE: dict[str, list[dict]] = {
    "Real Madrid won the Champions League final match on June 18, 2024": [
        _q("Real Madrid", "team", "won", "Champions League final", "event", start=["2024-06-18"])
    ],
    "The Champions League final match ended with a 2-1 victory for Real Madrid on June 18, 2024": [
        _q("Champions League final", "event", "resulted_in_victory_for", "Real Madrid", "team",
           start=["2024-06-18"])
    ],
    "Fans of Real Madrid celebrated the Champions League final match victory across the city on June 18, 2024": [
        _q("Fans of Real Madrid", "group", "celebrated", "Champions League final", "event",
           start=["2024-06-18"])
    ],
}


# -- relative time ------------------------------------------------------------


def _month_back(d: date) -> date:
    return (d.replace(day=1) - timedelta(days=1)).replace(day=1)


def _long(d: date) -> str:
    return f"{calendar.month_name[d.month]} {d.day}, {d.year}"


RELATIVE_TIME: tuple[tuple[re.Pattern, Callable[[date], str]], ...] = (
    (re.compile(r"\ba month ago\b", re.I),
     lambda d: f"in {calendar.month_name[_month_back(d).month]} {_month_back(d).year}"),
    (re.compile(r"\ba week ago\b", re.I), lambda d: f"in the week of {_long(d - timedelta(days=7))}"),
    (re.compile(r"\ba year ago\b", re.I), lambda d: f"in {d.year - 1}"),
    (re.compile(r"\byesterday\b", re.I), lambda d: f"on {_long(d - timedelta(days=1))}"),
    (re.compile(r"\btoday\b", re.I), lambda d: f"on {_long(d)}"),
)


def resolve_relative(sentence: str, observed: date) -> str:
    for pattern, render in RELATIVE_TIME:
        sentence = pattern.sub(lambda _m: render(observed), sentence)
    return sentence


# -- grammar ------------------------------------------------------------------


def _entity(spec: str) -> tuple[str, str]:
    m = _ENTITY.match(spec.strip())
    if m:
        return m["name"].strip(), m["label"].strip()
    return spec.strip(), DEFAULT_LABEL


def parse_grammar(fact: str) -> list[dict] | None:
    if "|" not in fact:
        return None
    out = []
    for spec in fact.split(" ; "):
        fields = [f.strip() for f in spec.strip().rstrip(".").split("|")]
        if len(fields) < 3 or not all(fields[:3]):
            return None
        (s, sl), p, (o, ol) = _entity(fields[0]), fields[1], _entity(fields[2])
        times: dict[str, list[str]] = {"start": [], "end": []}
        for extra in fields[3:]:
            key, sep, value = extra.partition("=")
            if not sep or key.strip() not in times:
                return None
            times[key.strip()] += [_iso(v) for v in value.split(",") if v.strip()]
        out.append(_q(s, sl, p, o, ol, times["start"], times["end"]))
    return out


def extract_reply(fact: str) -> str:
    fact = " ".join(fact.split())
    tuples = parse_grammar(fact)
    if tuples is None:
        key = fact.rstrip(".")
        tuples = EXTRACTION_TABLE.get(key)
        if tuples is None:
            for pattern, build in EXTRACTION_RULES:
                m = pattern.match(key)
                if m:
                    tuples = build(m)
                    break
    if tuples is None:
        return REFUSAL
    return json.dumps(tuples)


def decompose_reply(text: str, observed: date) -> str:
    facts: list[str] = []
    for sentence in split_sentences(text):
        key = " ".join(sentence.split())
        if key in DECOMPOSITION_TABLE:
            facts.extend(DECOMPOSITION_TABLE[key])
        else:
            facts.append(resolve_relative(key, observed))
    return "\n".join(f"- {f}" for f in facts)


def _section(user_prompt: str) -> tuple[date, str]:
    m = _OBS.search(user_prompt)
    observed = date.fromisoformat(m.group(1)) if m else date(1970, 1, 1)
    body = _SECTION.split(user_prompt, maxsplit=1)
    text = body[1] if len(body) == 2 else user_prompt
    text = text.split("\n\n" + RETRY_MARKER, 1)[0]
    return observed, text.strip()


class MockBackend:
    kind = "mock"

    def complete(self, req: CompletionRequest) -> str:
        observed, text = _section(req.user_prompt)
        if req.system_prompt.startswith(DECOMPOSE_TASK):
            return decompose_reply(text, observed)
        if req.system_prompt.startswith(EXTRACT_TASK):
            return extract_reply(text)
        return REFUSAL
