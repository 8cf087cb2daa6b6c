"""Text embeddings with a persistent content-hash cache, plus the similarity
kernels used by the merge engine."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .llm import DEFAULT_API_KEY_ENV, AuthError, RetryPolicy, check_endpoint, retrying
from .model import Entity, TemporalRelation

logger = logging.getLogger(__name__)

EMBED_ENDPOINT_ENV = "ATOM_EMBED_ENDPOINT"
EMBED_MODEL_ENV = "ATOM_EMBED_MODEL_ID"

MOCK_DIM = 128

# Synonym groups the mock embedder places close together.
MOCK_SYNONYMS: tuple[tuple[str, ...], ...] = (
    ("owns", "possesses", "has"),
    ("protested_against", "demonstrated_against", "rallied_against"),
    ("killed_people_in", "caused_deaths_in"),
)


class EmbeddingError(RuntimeError):
    pass


class MissingEmbeddingError(EmbeddingError):
    pass


@dataclass(frozen=True)
class SimilarityConfig:
    lam: float = 0.8
    beta: float = 0.2
    theta_entity: float = 0.8
    theta_relation: float = 0.7

    def __post_init__(self) -> None:
        for name in ("lam", "beta", "theta_entity", "theta_relation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if abs(self.lam + self.beta - 1.0) > 1e-9:
            raise ValueError("lam + beta must equal 1")


def unit(vec: np.ndarray) -> np.ndarray:
    """L2-normalize to float32; zero vectors are rejected."""
    v = np.asarray(vec, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        raise EmbeddingError("cannot normalize a zero or non-finite vector")
    return (v / n).astype(np.float32)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EmbeddingError(f"dimension mismatch: {a.shape} vs {b.shape}")
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        raise EmbeddingError("cosine of a zero vector")
    return float(np.clip(a @ b / denom, -1.0, 1.0))


def hybrid_vector(e: Entity, cfg: SimilarityConfig) -> np.ndarray:
    if e.name_embedding is None or e.label_embedding is None:
        raise MissingEmbeddingError(f"entity {e.key} has no embeddings")
    return cfg.lam * e.name_embedding.astype(np.float64) + cfg.beta * e.label_embedding.astype(
        np.float64
    )


def entity_similarity(e1: Entity, e2: Entity, cfg: SimilarityConfig = SimilarityConfig()) -> float:
    """Cosine of the weighted name+label vectors (not re-normalized first)."""
    return cosine(hybrid_vector(e1, cfg), hybrid_vector(e2, cfg))


def relation_similarity(r1: TemporalRelation, r2: TemporalRelation) -> float:
    if r1.predicate_embedding is None or r2.predicate_embedding is None:
        raise MissingEmbeddingError("relation has no predicate embedding")
    return cosine(r1.predicate_embedding, r2.predicate_embedding)


# -- providers ----------------------------------------------------------------


class EmbeddingProvider(Protocol):
    provider_id: str
    model_id: str

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray: ...


def _hash_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


class MockEmbedder:
    """Deterministic hash-to-sphere vectors; members of a synonym group sit
    near a shared anchor (pairwise cosine around 0.9)."""

    provider_id = "mock"

    def __init__(
        self,
        dim: int = MOCK_DIM,
        synonyms: Iterable[Sequence[str]] = MOCK_SYNONYMS,
        spread: float = 0.35,
    ) -> None:
        self.dim = dim
        self.model_id = f"hash-sphere-{dim}"
        self.spread = spread
        self._group = {word: "|".join(group) for group in synonyms for word in group}

    def _sphere(self, text: str) -> np.ndarray:
        rng = np.random.default_rng(_hash_seed(text))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def vector(self, text: str) -> np.ndarray:
        group = self._group.get(text)
        if group is None:
            return unit(self._sphere(text))
        return unit(self._sphere("synonym-group:" + group) + self.spread * self._sphere(text))

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.vector(t) for t in texts]) if texts else np.zeros((0, self.dim))


class HttpEmbedder:
    """Embeddings endpoint speaking ``{"model", "input": [...]}`` ->
    ``{"data": [{"embedding": [...]}, ...]}``."""

    provider_id = "http"

    def __init__(
        self,
        endpoint: str,
        model_id: str,
        *,
        api_key_env_var: str = DEFAULT_API_KEY_ENV,
        retry: RetryPolicy = RetryPolicy(),
        batch_size: int = 256,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] | None = None,
    ) -> None:
        self.endpoint = check_endpoint(endpoint)
        self.model_id = model_id
        self.api_key_env_var = api_key_env_var
        self.retry = retry
        self.batch_size = batch_size
        self._client = httpx.Client(timeout=60.0, transport=transport)
        self._sleep = sleep

    @classmethod
    def from_env(cls, **kwargs) -> HttpEmbedder:
        return cls(os.environ.get(EMBED_ENDPOINT_ENV, ""), os.environ.get(EMBED_MODEL_ENV, ""), **kwargs)

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        key = os.environ.get(self.api_key_env_var)
        if not key:
            raise AuthError(f"environment variable {self.api_key_env_var} is not set")
        headers = {"Authorization": f"Bearer {key}"}
        rows: list[list[float]] = []
        for i in range(0, len(texts), self.batch_size):
            body = {"model": self.model_id, "input": list(texts[i : i + self.batch_size])}
            kwargs = {} if self._sleep is None else {"sleep": self._sleep}
            resp = retrying(
                lambda: self._client.post(self.endpoint, json=body, headers=headers),
                self.retry,
                **kwargs,
            )
            data = sorted(resp.json()["data"], key=lambda d: d.get("index", 0))
            rows.extend(d["embedding"] for d in data)
        if len(rows) != len(texts):
            raise EmbeddingError(f"provider returned {len(rows)} vectors for {len(texts)} texts")
        return np.asarray(rows, dtype=np.float64)


# -- cache --------------------------------------------------------------------


def encode_vector(vec: np.ndarray) -> str:
    return base64.b64encode(np.asarray(vec, dtype="<f4").tobytes()).decode("ascii")


def decode_vector(data: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(data), dtype="<f4").astype(np.float32)


class EmbeddingCache:
    """Map from (provider, model, sha256(text)) to a unit vector, optionally
    backed by an append-only JSON-lines file.

    Writes are serialized by a lock; lookups are plain dict reads.
    """

    def __init__(self, path: str | os.PathLike | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._store: dict[tuple[str, str], np.ndarray] = {}
        self._dims: dict[str, int] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    @staticmethod
    def key(provider_id: str, text: str) -> str:
        return f"{provider_id}/{hashlib.sha256(text.encode('utf-8')).hexdigest()}"

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    vec = decode_vector(rec["vector"])
                except (ValueError, KeyError) as exc:
                    # a torn trailing write is tolerated; the entry is recomputed
                    logger.warning("skipping bad cache record %s:%d (%s)", self.path, lineno, exc)
                    continue
                if vec.shape[0] != rec["dim"]:
                    raise EmbeddingError(f"cache record {lineno} has inconsistent dim")
                self._remember(rec["key"], rec["model_id"], vec)

    def _remember(self, key: str, model_id: str, vec: np.ndarray) -> None:
        dim = self._dims.setdefault(model_id, vec.shape[0])
        if dim != vec.shape[0]:
            raise EmbeddingError(
                f"dimension mismatch for model {model_id}: cached {dim}, got {vec.shape[0]}"
            )
        self._store[(key, model_id)] = vec

    def get(self, key: str, model_id: str) -> np.ndarray | None:
        return self._store.get((key, model_id))

    def put_many(self, model_id: str, items: Mapping[str, np.ndarray]) -> None:
        with self._lock:
            lines = []
            for key, vec in items.items():
                self._remember(key, model_id, vec)
                lines.append(
                    json.dumps(
                        {"key": key, "model_id": model_id, "dim": int(vec.shape[0]),
                         "vector": encode_vector(vec)},
                        sort_keys=True,
                    )
                )
            if self.path is not None and lines:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write("\n".join(lines) + "\n")

    def __len__(self) -> int:
        return len(self._store)


class Embedder:
    """Cached, unit-normalizing front end over a provider."""

    def __init__(self, provider: EmbeddingProvider, cache: EmbeddingCache | None = None) -> None:
        self.provider = provider
        self.cache = cache if cache is not None else EmbeddingCache()

    @property
    def model_id(self) -> str:
        return self.provider.model_id

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            return []
        for t in texts:
            if not isinstance(t, str) or not t:
                raise EmbeddingError(f"cannot embed {t!r}")
        pid, mid = self.provider.provider_id, self.provider.model_id
        keys = [EmbeddingCache.key(pid, t) for t in texts]
        missing: dict[str, str] = {}
        for k, t in zip(keys, texts):
            if self.cache.get(k, mid) is None:
                missing.setdefault(k, t)
        if missing:
            raw = self.provider.embed_texts(list(missing.values()))
            if len(raw) != len(missing):
                raise EmbeddingError("provider returned a misaligned batch")
            self.cache.put_many(mid, {k: unit(v) for k, v in zip(missing, raw)})
        return [self.cache.get(k, mid) for k in keys]

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed([text])[0]


def mock_embedder(dim: int = MOCK_DIM, cache_path: str | os.PathLike | None = None) -> Embedder:
    return Embedder(MockEmbedder(dim), EmbeddingCache(cache_path))
