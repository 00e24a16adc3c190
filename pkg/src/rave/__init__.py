"""Retrieval- and scoring-aware verifiable claim detection."""

from rave.model import (
    Claim,
    ContextPool,
    Decision,
    DecisionError,
    Entity,
    EntityKind,
    ExtractionResult,
    RetrievalStats,
    ScoredSnippet,
    Snippet,
    Strategy,
    VerifiabilityLabel,
    parse_record,
    serialize_record,
)

__version__ = "0.1.0"

__all__ = [
    "Claim",
    "ContextPool",
    "Decision",
    "DecisionError",
    "Entity",
    "EntityKind",
    "ExtractionResult",
    "RetrievalStats",
    "ScoredSnippet",
    "Snippet",
    "Strategy",
    "VerifiabilityLabel",
    "parse_record",
    "serialize_record",
]
