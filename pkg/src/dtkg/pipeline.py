"""End-to-end orchestration: corpus -> observation batches -> snapshots ->
running graph, with per-batch checkpoints."""

from __future__ import annotations

import json
import logging
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .embedding import Embedder, EmbeddingCache, HttpEmbedder, MockEmbedder
from .extraction import (
    AtomicFact,
    Document,
    PromptTemplate,
    chunk_document,
    decompose_all,
    extract_all,
)
from .llm import BackendConfig, Gateway, make_gateway
from .merge import MergeConfig, MergeStats, parallel_merge, update_dtkg
from .model import EMPTY, Timestamp, Tkg, truncate_to_day, validate
from .storage import dumps, load_graph, save_graph, write_atomic

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class BatchFailedError(RuntimeError):
    def __init__(self, observed_at: Timestamp, stage: str, failed: int, total: int, first: Exception | None):
        self.observed_at = observed_at
        self.stage = stage
        self.failed = failed
        self.total = total
        self.first = first
        super().__init__(
            f"batch {observed_at}: {failed}/{total} {stage} slots failed (first: {first!r})"
        )


@dataclass(frozen=True)
class ObservationBatch:
    observed_at: Timestamp
    documents: tuple[Document, ...]


@dataclass(frozen=True)
class PipelineConfig:
    max_chunk_tokens: int = 400
    extraction_batch_size: int = 40
    merge: MergeConfig = MergeConfig()
    backend: BackendConfig = BackendConfig()
    embed_backend: str = "mock"
    embed_cache: Path | None = None
    checkpoint_dir: Path | None = None
    granularity: str = "day"
    max_failure_ratio: float = 0.10
    prompt_dir: Path | None = None

    def __post_init__(self) -> None:
        if self.max_chunk_tokens < 16 or self.extraction_batch_size < 1:
            raise ValueError("chunk budget and batch size must be positive")
        if self.granularity not in ("day", "exact"):
            raise ValueError(f"unknown granularity {self.granularity!r}")


@dataclass
class StageReport:
    backend: str = "mock"
    batches: int = 0
    documents: int = 0
    chunks: int = 0
    facts: int = 0
    atomic_graphs: int = 0
    relations_extracted: int = 0
    failed_slots: int = 0
    merge_rounds: int = 0
    decompose_s: float = 0.0
    extract_s: float = 0.0
    merge_s: float = 0.0
    update_s: float = 0.0
    total_s: float = 0.0

    @property
    def merge_share(self) -> float:
        """Fraction of wall time spent in parallel merge plus graph update."""
        return (self.merge_s + self.update_s) / self.total_s if self.total_s else 0.0

    def as_dict(self) -> dict:
        out = asdict(self)
        out["merge_share"] = self.merge_share
        return out


def group_by_observation(docs: Iterable[Document], granularity: str = "day") -> list[ObservationBatch]:
    """Group documents by observation time (truncated to the UTC day for
    ``day``), ascending; document order within a batch is preserved."""
    groups: dict[Timestamp, list[Document]] = defaultdict(list)
    for d in docs:
        key = truncate_to_day(d.observed_at) if granularity == "day" else d.observed_at
        groups[key].append(d)
    return [ObservationBatch(k, tuple(groups[k])) for k in sorted(groups)]


def default_embedder(config: PipelineConfig) -> Embedder:
    cache = EmbeddingCache(config.embed_cache)
    if config.embed_backend == "mock":
        return Embedder(MockEmbedder(), cache)
    return Embedder(HttpEmbedder.from_env(), cache)


class Pipeline:
    """One stream of batches into one running graph. Not for concurrent use."""

    def __init__(
        self,
        config: PipelineConfig = PipelineConfig(),
        gateway: Gateway | None = None,
        embedder: Embedder | None = None,
    ) -> None:
        if gateway is None:
            backend = replace(config.backend, max_concurrent_requests=config.extraction_batch_size)
            gateway = make_gateway(backend)
        self.config = config
        self.gateway = gateway
        self.embedder = embedder or default_embedder(config)
        self.report = StageReport(backend=gateway.kind)
        self._decompose_prompt = PromptTemplate.load("decompose", config.prompt_dir)
        self._extract_prompt = PromptTemplate.load("extract", config.prompt_dir)

    # -- stages ---------------------------------------------------------------

    def _check_budget(self, observed_at: Timestamp, stage: str, results: Sequence) -> None:
        failures = [r for r in results if isinstance(r, Exception)]
        self.report.failed_slots += len(failures)
        if not failures:
            return
        if len(failures) > self.config.max_failure_ratio * len(results):
            raise BatchFailedError(observed_at, stage, len(failures), len(results), failures[0])
        for exc in failures:
            logger.warning("batch %s: skipping failed %s slot: %s", observed_at, stage, exc)

    def facts_for(self, batch: ObservationBatch) -> list[AtomicFact]:
        chunks = [c for d in batch.documents for c in chunk_document(d, self.config.max_chunk_tokens)]
        self.report.documents += len(batch.documents)
        self.report.chunks += len(chunks)
        t0 = time.perf_counter()
        decomposed = decompose_all(chunks, self.gateway, self._decompose_prompt, self.config.max_chunk_tokens)
        self.report.decompose_s += time.perf_counter() - t0
        self._check_budget(batch.observed_at, "decomposition", decomposed)
        facts = [f for r in decomposed if not isinstance(r, Exception) for f in r]
        self.report.facts += len(facts)
        return facts

    def atomic_graphs(self, facts: Sequence[AtomicFact], observed_at: Timestamp = 0) -> list[Tkg]:
        t0 = time.perf_counter()
        results = extract_all(facts, self.gateway, self.embedder, self._extract_prompt)
        self.report.extract_s += time.perf_counter() - t0
        self._check_budget(observed_at, "extraction", results)
        graphs = [g for g in results if not isinstance(g, Exception)]
        self.report.atomic_graphs += len(graphs)
        self.report.relations_extracted += sum(len(g.relations) for g in graphs)
        return graphs

    def merge_snapshot(self, graphs: Sequence[Tkg]) -> Tkg:
        stats = MergeStats()
        t0 = time.perf_counter()
        snapshot = parallel_merge(graphs, self.config.merge, stats)
        self.report.merge_s += time.perf_counter() - t0
        self.report.merge_rounds += stats.rounds
        return snapshot

    def build_snapshot(self, batch: ObservationBatch) -> Tkg:
        """chunk -> decompose -> extract -> parallel merge for one batch."""
        facts = self.facts_for(batch)
        graphs = self.atomic_graphs(facts, batch.observed_at)
        return self.merge_snapshot(graphs)

    # -- stream ---------------------------------------------------------------

    def _load_checkpoint(self) -> tuple[Tkg, set[Timestamp]] | None:
        ckpt = self.config.checkpoint_dir
        if ckpt is None or not (Path(ckpt) / MANIFEST).exists():
            return None
        manifest = json.loads((Path(ckpt) / MANIFEST).read_text(encoding="utf-8"))
        graph = load_graph(Path(ckpt) / manifest["graph"]) if manifest["graph"] else EMPTY
        return graph, set(manifest["processed"])

    def _save_checkpoint(self, dtkg: Tkg, processed: set[Timestamp]) -> None:
        ckpt = Path(self.config.checkpoint_dir)
        ckpt.mkdir(parents=True, exist_ok=True)
        name = f"dtkg-{len(processed):06d}.json"
        save_graph(dtkg, ckpt / name, include_embeddings=True)
        manifest_path = ckpt / MANIFEST
        previous = None
        if manifest_path.exists():
            previous = json.loads(manifest_path.read_text(encoding="utf-8")).get("graph")
        write_atomic(
            manifest_path,
            dumps({"format_version": 1, "graph": name, "processed": sorted(processed)}),
        )
        if previous and previous != name:
            for stale in (ckpt / previous, ckpt / previous.replace(".json", ".embeddings.json")):
                stale.unlink(missing_ok=True)

    def run_stream(self, batches: Sequence[ObservationBatch], initial: Tkg | None = None) -> Tkg:
        """Fold every batch's snapshot into the running graph in observation
        order. With a checkpoint directory the graph is saved after each
        batch, and a rerun skips batches already recorded there."""
        keys = [b.observed_at for b in batches]
        if keys != sorted(keys) or len(set(keys)) != len(keys):
            raise ValueError("batches must be strictly ascending by observation time")
        started = time.perf_counter()
        dtkg = initial if initial is not None else EMPTY
        processed: set[Timestamp] = set()
        restored = self._load_checkpoint()
        if restored is not None:
            dtkg, processed = restored
            logger.info("resuming after %d processed batch(es)", len(processed))
        try:
            for batch in batches:
                if batch.observed_at in processed:
                    continue
                snapshot = self.build_snapshot(batch)
                t0 = time.perf_counter()
                dtkg = update_dtkg(dtkg, snapshot, self.config.merge)
                self.report.update_s += time.perf_counter() - t0
                self.report.batches += 1
                processed.add(batch.observed_at)
                problems = validate(dtkg)
                if problems:
                    logger.warning("graph after batch %s has %d violation(s): %s",
                                   batch.observed_at, len(problems), problems[0])
                if self.config.checkpoint_dir is not None:
                    self._save_checkpoint(dtkg, processed)
        finally:
            self.report.total_s += time.perf_counter() - started
        return dtkg

    def bench(self, batches: Sequence[ObservationBatch]) -> StageReport:
        """Run the stream once and return wall-clock time per stage."""
        self.report = StageReport(backend=self.gateway.kind)
        self.run_stream(batches)
        return self.report


def bench(batches: Sequence[ObservationBatch], config: PipelineConfig = PipelineConfig(), **kwargs) -> StageReport:
    return Pipeline(replace(config, checkpoint_dir=None), **kwargs).bench(batches)
