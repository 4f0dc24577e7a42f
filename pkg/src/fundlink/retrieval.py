"""Chunking and hybrid lexical-dense retrieval over opportunity trees.

Two chunkers: hierarchical (one chunk per tree node, text = the node's
markdown subtree, so a level-2 chunk subsumes its level-3 content) and a
sliding word window over the whole-document markdown. Chunks are scored
with a weighted hybrid of max-normalised Okapi BM25 and a dense similarity
in [0, 1], the top-k candidates are optionally re-ranked, ancestor or
descendant duplicates are pruned (branch-deduplication, lower score
loses), and the top-k_final survivors form the retrieval context.

The default dense scorer and re-ranker are deterministic so the whole
pipeline is reproducible offline; production adapters can swap in model
services behind the same ports.
"""

from __future__ import annotations

import math
import re
import zlib
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Protocol, Sequence

from .doctree import OpportunityDoc, iter_nodes, serialize_markdown
from .errors import DomainError, EmptyIndex

HIERARCHICAL = "hierarchical"
SLIDING = "sliding"

BM25_K1 = 1.2
BM25_B = 0.75

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


@lru_cache(maxsize=8192)
def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase alphanumeric tokens; no stemming, no stopwords."""
    return tuple(_TOKEN_RE.findall(text.lower()))


@dataclass(frozen=True)
class Chunk:
    """A retrieval unit. Hierarchical chunks carry the child-index path
    from the root and depth = heading level; sliding chunks have an empty
    path and depth 0."""

    chunk_id: str
    doc_id: str
    node_path: tuple[int, ...]
    depth: int
    text: str
    word_count: int


@dataclass(frozen=True)
class RetrievalConfig:
    alpha: float = 0.25
    k: int = 10
    k_final: int = 5
    use_reranker: bool = False
    chunker: str = HIERARCHICAL
    window_words: int = 200
    overlap_words: int = 50

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.k < 1 or self.k_final < 1:
            raise DomainError("k and k_final must be >= 1")
        if self.k_final > self.k:
            raise DomainError(f"k_final ({self.k_final}) must not exceed k ({self.k})")
        if self.chunker not in (HIERARCHICAL, SLIDING):
            raise DomainError(f"unknown chunker {self.chunker!r}")
        if not 0 <= self.overlap_words < self.window_words:
            raise DomainError("require 0 <= overlap_words < window_words")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "k": self.k,
            "k_final": self.k_final,
            "use_reranker": self.use_reranker,
            "chunker": self.chunker,
            "window_words": self.window_words,
            "overlap_words": self.overlap_words,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievalConfig":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        return cls(**known)


@dataclass
class ScoredChunk:
    chunk: Chunk
    bm25_raw: float
    bm25_norm: float
    dense: float
    hybrid: float
    rerank: float | None = None

    @property
    def sort_score(self) -> float:
        return self.rerank if self.rerank is not None else self.hybrid

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk.chunk_id,
            "bm25_raw": self.bm25_raw,
            "bm25_norm": self.bm25_norm,
            "dense": self.dense,
            "hybrid": self.hybrid,
            "rerank": self.rerank,
        }


def _rank_key(score: float, chunk: Chunk):
    # score desc, then deeper (more specific) chunks, then id for stability
    return (-score, -chunk.depth, chunk.chunk_id)


# ---------------------------------------------------------------------------
# Chunkers


def chunk_hierarchical(doc: OpportunityDoc) -> list[Chunk]:
    """One chunk per tree node, depth-first, text = node_text(node)."""
    chunks: list[Chunk] = []

    def walk(node, path: tuple[int, ...]) -> None:
        text = serialize_markdown(node)
        chunks.append(Chunk(
            chunk_id=f"{doc.opportunity_id}#n{len(chunks):04d}",
            doc_id=doc.opportunity_id,
            node_path=path,
            depth=node.level,
            text=text,
            word_count=len(text.split()),
        ))
        for i, child in enumerate(node.children):
            walk(child, path + (i,))

    walk(doc.root, ())
    return chunks


def chunk_sliding(doc: OpportunityDoc, window_words: int = 200,
                  overlap_words: int = 50) -> list[Chunk]:
    """Fixed word windows over the whole-document markdown, stride =
    window - overlap; the final window truncates at the document end."""
    if not 0 <= overlap_words < window_words:
        raise DomainError("require 0 <= overlap_words < window_words")
    words = serialize_markdown(doc.root).split()
    if not words:
        return []
    stride = window_words - overlap_words
    chunks: list[Chunk] = []
    start = 0
    while True:
        final = start + window_words >= len(words)
        end = len(words) if final else start + window_words
        text = " ".join(words[start:end])
        chunks.append(Chunk(
            chunk_id=f"{doc.opportunity_id}#w{start:05d}",
            doc_id=doc.opportunity_id,
            node_path=(),
            depth=0,
            text=text,
            word_count=end - start,
        ))
        if final:
            return chunks
        start += stride


def build_chunks(doc: OpportunityDoc, config: RetrievalConfig) -> list[Chunk]:
    if config.chunker == SLIDING:
        return chunk_sliding(doc, config.window_words, config.overlap_words)
    return chunk_hierarchical(doc)


# ---------------------------------------------------------------------------
# BM25


@dataclass
class ChunkIndex:
    """Per-document corpus statistics for BM25 over one chunk set."""

    chunks: list[Chunk]
    term_freqs: list[Counter]
    doc_freqs: Counter
    lengths: list[int]
    avg_length: float


def build_index(chunks: Sequence[Chunk]) -> ChunkIndex:
    if not chunks:
        raise EmptyIndex("cannot index zero chunks")
    term_freqs = [Counter(tokenize(c.text)) for c in chunks]
    lengths = [sum(tf.values()) for tf in term_freqs]
    doc_freqs: Counter = Counter()
    for tf in term_freqs:
        doc_freqs.update(tf.keys())
    avg_length = sum(lengths) / len(lengths)
    return ChunkIndex(list(chunks), term_freqs, doc_freqs, lengths, avg_length)


def bm25_scores(index: ChunkIndex, query: str) -> list[tuple[float, float]]:
    """(raw, max-normalised) Okapi BM25 per chunk, query tokens with
    repeats. IDF uses the non-negative ln(1 + (N - df + 0.5)/(df + 0.5))
    form so raw scores stay >= 0."""
    if not index.chunks:
        raise EmptyIndex("cannot score an empty index")
    n = len(index.chunks)
    terms = tokenize(query)
    raws: list[float] = []
    for tf, length in zip(index.term_freqs, index.lengths):
        score = 0.0
        if index.avg_length > 0:
            denom_norm = BM25_K1 * (1.0 - BM25_B + BM25_B * length / index.avg_length)
            for term in terms:
                freq = tf.get(term, 0)
                if not freq:
                    continue
                df = index.doc_freqs[term]
                idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
                score += idf * freq * (BM25_K1 + 1.0) / (freq + denom_norm)
        raws.append(score)
    max_raw = max(raws)
    if max_raw > 0.0:
        return [(raw, raw / max_raw) for raw in raws]
    return [(raw, 0.0) for raw in raws]


# ---------------------------------------------------------------------------
# Dense scorer and re-ranker ports


class DenseScorer(Protocol):
    def score(self, query: str, text: str) -> float:
        """Semantic similarity in [0, 1]; raises ScorerUnavailable on failure."""


class Reranker(Protocol):
    def rerank(self, query: str, candidates: Sequence[ScoredChunk]) -> list[float]:
        """One re-ranking score per candidate, aligned with the input."""


TRIGRAM_DIM = 256


@lru_cache(maxsize=8192)
def _trigram_vector(text: str) -> tuple[tuple[int, ...], float]:
    """Hashed character-3-gram counts (crc32 mod 256) plus the L2 norm.
    Texts shorter than 3 characters hash as a single gram."""
    norm = " ".join(text.lower().split())
    if not norm:
        return (0,) * TRIGRAM_DIM, 0.0
    grams = [norm[i:i + 3] for i in range(len(norm) - 2)] or [norm]
    vec = [0] * TRIGRAM_DIM
    for gram in grams:
        vec[zlib.crc32(gram.encode("utf-8")) % TRIGRAM_DIM] += 1
    return tuple(vec), math.sqrt(sum(v * v for v in vec))


class TrigramHashScorer:
    """Deterministic offline default: cosine similarity of hashed
    character-3-gram term-frequency vectors. Non-negative vectors, so the
    result is always in [0, 1]."""

    def score(self, query: str, text: str) -> float:
        qvec, qnorm = _trigram_vector(query)
        tvec, tnorm = _trigram_vector(text)
        if qnorm == 0.0 or tnorm == 0.0:
            return 0.0
        dot = sum(a * b for a, b in zip(qvec, tvec))
        return min(1.0, dot / (qnorm * tnorm))


class PassthroughReranker:
    """Deterministic offline default: echoes the hybrid scores, so
    re-sorting by re-rank reproduces the incoming order."""

    def rerank(self, query: str, candidates: Sequence[ScoredChunk]) -> list[float]:
        return [c.hybrid for c in candidates]


def dense_score(scorer: DenseScorer, query: str, chunk: Chunk) -> float:
    return scorer.score(query, chunk.text)


def hybrid_combine(alpha: float, bm25_norm: float, dense: float) -> float:
    """alpha * bm25_norm + (1 - alpha) * dense; all arguments in [0, 1]."""
    for name, value in (("alpha", alpha), ("bm25_norm", bm25_norm), ("dense", dense)):
        if not 0.0 <= value <= 1.0:
            raise DomainError(f"{name} must be in [0, 1], got {value}")
    return alpha * bm25_norm + (1.0 - alpha) * dense


# ---------------------------------------------------------------------------
# Branch-deduplication and the pipeline


def _related(a: Chunk, b: Chunk) -> bool:
    if a.depth == 0 or b.depth == 0:
        return False  # sliding-window chunks are never related
    pa, pb = a.node_path, b.node_path
    shorter, longer = (pa, pb) if len(pa) <= len(pb) else (pb, pa)
    return longer[:len(shorter)] == shorter


def branch_dedup(candidates: Sequence[ScoredChunk]) -> list[ScoredChunk]:
    """Prune ancestor-descendant pairs: walking candidates best-first,
    keep a chunk only if no already-kept chunk is a relative. Survivors
    keep their input order and form an antichain under the path-prefix
    relation; every discarded chunk has a surviving relative with a score
    at least its own."""
    order = sorted(range(len(candidates)),
                   key=lambda i: _rank_key(candidates[i].sort_score, candidates[i].chunk))
    kept: set[int] = set()
    for i in order:
        if not any(_related(candidates[i].chunk, candidates[j].chunk) for j in kept):
            kept.add(i)
    return [c for i, c in enumerate(candidates) if i in kept]


def score_chunks(index: ChunkIndex, query: str, alpha: float,
                 scorer: DenseScorer | None = None) -> list[ScoredChunk]:
    """Score every chunk in the index with the hybrid formula (unsorted)."""
    scorer = scorer or TrigramHashScorer()
    scored = []
    for chunk, (raw, norm) in zip(index.chunks, bm25_scores(index, query)):
        dense = dense_score(scorer, query, chunk)
        scored.append(ScoredChunk(
            chunk=chunk,
            bm25_raw=raw,
            bm25_norm=norm,
            dense=dense,
            hybrid=hybrid_combine(alpha, norm, dense),
        ))
    return scored


def rank_candidates(index: ChunkIndex, query: str, config: RetrievalConfig,
                    scorer: DenseScorer | None = None) -> list[ScoredChunk]:
    """Hybrid-score all chunks and return the top-k candidate stage."""
    scored = score_chunks(index, query, config.alpha, scorer)
    scored.sort(key=lambda s: _rank_key(s.hybrid, s.chunk))
    return scored[:config.k]


def retrieve_from_index(index: ChunkIndex, query: str, config: RetrievalConfig,
                        scorer: DenseScorer | None = None,
                        reranker: Reranker | None = None) -> list[ScoredChunk]:
    """Full pipeline over a prebuilt index: top-k by hybrid, optional
    re-rank of the k set, branch-dedup, then top-k_final in rank order."""
    candidates = rank_candidates(index, query, config, scorer)
    if config.use_reranker:
        reranker = reranker or PassthroughReranker()
        for cand, score in zip(candidates, reranker.rerank(query, candidates)):
            cand.rerank = score
        candidates.sort(key=lambda s: _rank_key(s.sort_score, s.chunk))
    survivors = branch_dedup(candidates)
    return survivors[:config.k_final]


def retrieve(doc: OpportunityDoc, query: str, config: RetrievalConfig,
             scorer: DenseScorer | None = None,
             reranker: Reranker | None = None) -> list[ScoredChunk]:
    """Chunk the document per the config and run the retrieval pipeline."""
    index = build_index(build_chunks(doc, config))
    return retrieve_from_index(index, query, config, scorer, reranker)


def trace_record(doc_id: str, query: str, ranked: Sequence[ScoredChunk]) -> dict:
    """One JSON-lines trace record per (doc, query) for regression snapshots."""
    return {"doc_id": doc_id, "query": query,
            "chunks": [s.to_dict() for s in ranked]}
