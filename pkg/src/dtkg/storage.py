"""Graph documents, corpus files and atomic file writes.

A graph document is JSON with sorted keys and canonically ordered entities
and relations, so a given graph always serializes to the same bytes.
Timestamps are UNIX integers. Embeddings, when kept, go to a sidecar file
next to the graph (``<stem>.embeddings.json``) with base64 float32 vectors
aligned to the entity and relation order.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable

from .embedding import decode_vector, encode_vector
from .extraction import Document
from .model import Entity, TemporalRelation, Tkg, parse_timestamp, time_list, validate

FORMAT_VERSION = 1


class GraphFormatError(ValueError):
    pass


class GraphValidationError(ValueError):
    def __init__(self, violations) -> None:
        self.violations = list(violations)
        shown = "; ".join(str(v) for v in self.violations[:5])
        super().__init__(f"{len(self.violations)} invariant violation(s): {shown}")


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def sidecar_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}.embeddings.json")


def _vec(v) -> str | None:
    return None if v is None else encode_vector(v)


def graph_to_documents(tkg: Tkg, include_embeddings: bool = True) -> tuple[dict, dict | None]:
    canon = Tkg.from_parts(tkg.entities, tkg.relations)
    doc = {
        "format_version": FORMAT_VERSION,
        "entities": [{"name": e.name, "label": e.label} for e in canon.entities],
        "relations": [
            {
                "subject": list(r.subject),
                "predicate": r.predicate,
                "object": list(r.object),
                "t_start": list(r.t_start),
                "t_end": list(r.t_end),
                "t_obs": list(r.t_obs),
            }
            for r in canon.relations
        ],
        "embeddings": None,
    }
    if not include_embeddings:
        return doc, None
    side = {
        "format_version": FORMAT_VERSION,
        "entities": [
            {"name_embedding": _vec(e.name_embedding), "label_embedding": _vec(e.label_embedding)}
            for e in canon.entities
        ],
        "relations": [{"predicate_embedding": _vec(r.predicate_embedding)} for r in canon.relations],
    }
    return doc, side


def save_graph(tkg: Tkg, path: str | os.PathLike, include_embeddings: bool = True) -> None:
    violations = validate(tkg)
    if violations:
        raise GraphValidationError(violations)
    path = Path(path)
    doc, side = graph_to_documents(tkg, include_embeddings)
    if side is not None:
        side_path = sidecar_path(path)
        doc["embeddings"] = side_path.name
        write_atomic(side_path, dumps(side))
    write_atomic(path, dumps(doc))


def _check_version(doc: Any, where: str) -> None:
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise GraphFormatError(f"{where}: not a graph document")
    if doc["format_version"] != FORMAT_VERSION:
        raise GraphFormatError(
            f"{where}: unsupported format_version {doc['format_version']} (reader is v{FORMAT_VERSION})"
        )


def graph_from_documents(doc: dict, side: dict | None = None) -> Tkg:
    """Build a graph from parsed documents without validating it."""
    try:
        ent_vecs = side["entities"] if side else [{}] * len(doc["entities"])
        rel_vecs = side["relations"] if side else [{}] * len(doc["relations"])
        if len(ent_vecs) != len(doc["entities"]) or len(rel_vecs) != len(doc["relations"]):
            raise GraphFormatError("embedding sidecar does not match the graph")

        def vec(d: dict, k: str):
            v = d.get(k)
            return None if v is None else decode_vector(v)

        entities = tuple(
            Entity(e["name"], e["label"], vec(v, "name_embedding"), vec(v, "label_embedding"))
            for e, v in zip(doc["entities"], ent_vecs)
        )
        relations = tuple(
            TemporalRelation(
                tuple(r["subject"]),
                r["predicate"],
                tuple(r["object"]),
                tuple(int(t) for t in r["t_start"]),
                tuple(int(t) for t in r["t_end"]),
                tuple(int(t) for t in r["t_obs"]),
                vec(v, "predicate_embedding"),
            )
            for r, v in zip(doc["relations"], rel_vecs)
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, GraphFormatError):
            raise
        raise GraphFormatError(f"malformed graph document: {exc}") from exc
    return Tkg(entities, relations)


def load_graph(path: str | os.PathLike) -> Tkg:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: invalid JSON ({exc})") from exc
    _check_version(doc, str(path))
    side = None
    if doc.get("embeddings"):
        side_path = path.with_name(doc["embeddings"])
        try:
            side = json.loads(side_path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise GraphFormatError(f"{path}: embedding sidecar {side_path.name} is missing") from None
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"{side_path}: invalid JSON ({exc})") from exc
        _check_version(side, str(side_path))
    tkg = graph_from_documents(doc, side)
    violations = validate(tkg)
    if violations:
        raise GraphValidationError(violations)
    return tkg


# -- corpus -------------------------------------------------------------------


def document_from_record(rec: dict) -> Document:
    try:
        return Document(str(rec["doc_id"]), rec["text"], parse_timestamp(rec["observed_at"]))
    except KeyError as exc:
        raise ValueError(f"corpus record lacks {exc}") from None


def load_corpus(path: str | os.PathLike) -> list[Document]:
    """Read JSON-lines ``{"doc_id", "text", "observed_at"}`` records."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                docs.append(document_from_record(json.loads(line)))
            except (json.JSONDecodeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return docs


def write_jsonl(path: str | os.PathLike, records: Iterable[dict]) -> None:
    write_atomic(path, "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records))


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def times_from_json(values: Iterable) -> tuple[int, ...]:
    return time_list(parse_timestamp(v) for v in values)
