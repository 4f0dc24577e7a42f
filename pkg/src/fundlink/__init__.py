"""fundlink: funding-opportunity parsing, hybrid-retrieval metadata
extraction, evaluation, record linkage, and a research-funding store."""

from .doctree import (Block, DocNode, OpportunityDoc, UpdateEntry,
                      extract_updates, node_text, parse_opportunity_html,
                      serialize_markdown)
from .extraction import (FIELD_QUESTIONS, MetadataField, NormalizedAnswer,
                         build_prompt, extract_fields, normalize_answer,
                         parse_answer)
from .linking import (LinkingThresholds, LinkResult, align_cluster_person,
                      cluster_panel_attendance, fuzzy_ratio,
                      link_application_opportunity, link_application_project,
                      validate_links, wilson_interval)
from .retrieval import (Chunk, ChunkIndex, RetrievalConfig, ScoredChunk,
                        branch_dedup, bm25_scores, build_index,
                        chunk_hierarchical, chunk_sliding, hybrid_combine,
                        retrieve)
from .store import GtrStore, make_uuid5

__version__ = "0.1.0"

__all__ = [
    "Block", "DocNode", "OpportunityDoc", "UpdateEntry",
    "extract_updates", "node_text", "parse_opportunity_html", "serialize_markdown",
    "FIELD_QUESTIONS", "MetadataField", "NormalizedAnswer",
    "build_prompt", "extract_fields", "normalize_answer", "parse_answer",
    "LinkingThresholds", "LinkResult", "align_cluster_person",
    "cluster_panel_attendance", "fuzzy_ratio",
    "link_application_opportunity", "link_application_project",
    "validate_links", "wilson_interval",
    "Chunk", "ChunkIndex", "RetrievalConfig", "ScoredChunk",
    "branch_dedup", "bm25_scores", "build_index",
    "chunk_hierarchical", "chunk_sliding", "hybrid_combine", "retrieve",
    "GtrStore", "make_uuid5",
    "__version__",
]
