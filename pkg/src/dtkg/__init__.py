"""Streaming construction of dynamic temporal knowledge graphs from
timestamped text."""

from .embedding import Embedder, SimilarityConfig, cosine, entity_similarity, relation_similarity
from .evaluation import GoldAnnotation, classify, er_rr_scores, evaluate, rates, stability
from .extraction import AtomicFact, Chunk, Document, chunk_document, decompose, extract_all, extract_quintuples
from .llm import BackendConfig, CompletionRequest, Gateway, make_gateway
from .merge import MergeConfig, binary_merge, parallel_merge, resolve_entities, update_dtkg
from .model import EMPTY, Entity, TemporalRelation, Tkg, normalize_name, validate
from .pipeline import ObservationBatch, Pipeline, PipelineConfig, group_by_observation
from .storage import load_graph, save_graph

__version__ = "0.1.0"

__all__ = [
    "AtomicFact", "BackendConfig", "Chunk", "CompletionRequest", "Document", "EMPTY", "Embedder",
    "Entity", "Gateway", "GoldAnnotation", "MergeConfig", "ObservationBatch", "Pipeline",
    "PipelineConfig", "SimilarityConfig", "TemporalRelation", "Tkg", "binary_merge",
    "chunk_document", "classify", "cosine", "decompose", "entity_similarity", "er_rr_scores",
    "evaluate", "extract_all", "extract_quintuples", "group_by_observation", "load_graph",
    "make_gateway", "normalize_name", "parallel_merge", "rates", "relation_similarity",
    "resolve_entities", "save_graph", "stability", "update_dtkg", "validate",
]
