"""Evaluation metrics, the execution sandbox and corpus-level reports."""

from .metrics import Embedder, edit_similarity, levenshtein, semantic_similarity
from .report import (
    CSV_FIELDS,
    METRICS,
    SCHEMA_VERSION,
    EvalReport,
    PerplexityComparison,
    SampleRecord,
    aggregate,
    compare_perplexity,
    evaluate_corpus,
)
from .sandbox import ExecResult, SandboxConfig, SandboxUnavailable, compiler_path, reexecutability

__all__ = [
    "CSV_FIELDS",
    "METRICS",
    "SCHEMA_VERSION",
    "Embedder",
    "EvalReport",
    "ExecResult",
    "PerplexityComparison",
    "SampleRecord",
    "SandboxConfig",
    "SandboxUnavailable",
    "aggregate",
    "compare_perplexity",
    "compiler_path",
    "edit_similarity",
    "evaluate_corpus",
    "levenshtein",
    "reexecutability",
    "semantic_similarity",
]
