"""Evaluation toolkit for model-written chart descriptions."""

from .matching import MatchConfig, MatchResult, assign, phi
from .model import ChartSchema, DataFact, FactType, SemanticLevel, canonical_serialize, semantic_level_of

__all__ = [
    "ChartSchema",
    "DataFact",
    "FactType",
    "MatchConfig",
    "MatchResult",
    "SemanticLevel",
    "assign",
    "canonical_serialize",
    "phi",
    "semantic_level_of",
]

__version__ = "0.1.0"
