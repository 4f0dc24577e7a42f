"""Chunking, BM25, dense scoring, hybrid combination, and pipeline tests."""

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fundlink.doctree import Block, DocNode, OpportunityDoc
from fundlink.errors import DomainError, EmptyIndex
from fundlink.retrieval import (Chunk, PassthroughReranker, RetrievalConfig,
                                ScoredChunk, TrigramHashScorer, branch_dedup,
                                bm25_scores, build_index, chunk_hierarchical,
                                chunk_sliding, hybrid_combine, rank_candidates,
                                retrieve, score_chunks, tokenize, trace_record)
from generators import random_doc, random_query, random_words
from oracles import brute_bm25, simple_tokens, trigram_cosine


def toy_doc() -> OpportunityDoc:
    root = DocNode("Storage call", 1,
                   [Block("paragraph", "A call for storage projects of all kinds.")], [
        DocNode("Award amounts", 2,
                [Block("paragraph", "Award value limits apply to every fund.")], [
            DocNode("Limits", 3,
                    [Block("paragraph", "The minimum fund value is 50000 pounds.")], []),
        ]),
        DocNode("Eligibility", 2,
                [Block("paragraph", "Eligible organisations include universities.")], []),
    ])
    return OpportunityDoc("toy", "Storage call", {}, root)


# -- chunkers ------------------------------------------------------------------


def test_hierarchical_one_chunk_per_node_depth_first():
    chunks = chunk_hierarchical(toy_doc())
    assert len(chunks) == 4
    assert [c.node_path for c in chunks] == [(), (0,), (0, 0), (1,)]
    assert [c.depth for c in chunks] == [1, 2, 3, 2]


def test_hierarchical_subsection_text_subsumed_by_parent():
    chunks = chunk_hierarchical(toy_doc())
    by_path = {c.node_path: c for c in chunks}
    assert by_path[(0, 0)].text in by_path[(0,)].text
    assert by_path[(0,)].text in by_path[()].text


def test_hierarchical_single_node_tree():
    doc = OpportunityDoc("one", "t", {},
                         DocNode("t", 1, [Block("paragraph", "only text")], []))
    chunks = chunk_hierarchical(doc)
    assert len(chunks) == 1
    assert chunks[0].text == "# t\n\nonly text"


def _words_doc(n_words: int) -> OpportunityDoc:
    text = " ".join(f"w{i:04d}" for i in range(n_words - 2))  # heading adds 2
    return OpportunityDoc("wdoc", "t", {},
                          DocNode("t", 1, [Block("paragraph", text)], []))


def test_sliding_500_words_gives_three_windows():
    # stride 150: starts 0, 150, 300; the last spans 300-500
    doc = _words_doc(500)
    chunks = chunk_sliding(doc, 200, 50)
    assert [c.chunk_id for c in chunks] == ["wdoc#w00000", "wdoc#w00150",
                                            "wdoc#w00300"]
    assert [c.word_count for c in chunks] == [200, 200, 200]
    assert chunks[-1].text.split()[-1] == "w0497"  # last of the 500 tokens


def test_sliding_short_document_single_window():
    doc = _words_doc(120)
    chunks = chunk_sliding(doc, 200, 50)
    assert len(chunks) == 1
    assert chunks[0].word_count == 120


def test_sliding_consecutive_overlap_exactly_50():
    for n in (201, 350, 777, 1234):
        doc = _words_doc(n)
        chunks = chunk_sliding(doc, 200, 50)
        words = " ".join(f"w{i:04d}" for i in range(n - 2))
        all_words = ("# t " + words).split()
        offsets = [int(c.chunk_id.split("#w")[1]) for c in chunks]
        for prev_off, cur_off, prev, cur in zip(
                offsets, offsets[1:], chunks, chunks[1:]):
            prev_words = prev.text.split()
            cur_words = cur.text.split()
            overlap = prev_off + len(prev_words) - cur_off
            assert overlap == 50
            assert prev_words[-overlap:] == cur_words[:overlap]
        # coverage: the union of windows is the whole token stream
        assert offsets[0] == 0
        assert offsets[-1] + chunks[-1].word_count == len(all_words)


def test_sliding_rejects_bad_overlap():
    with pytest.raises(DomainError):
        chunk_sliding(_words_doc(100), 100, 100)


# -- BM25 ----------------------------------------------------------------------


def _chunks_from_texts(texts):
    return [Chunk(chunk_id=f"c{i}", doc_id="d", node_path=(), depth=0,
                  text=t, word_count=len(t.split()))
            for i, t in enumerate(texts)]


def test_bm25_matches_brute_force_toy_corpus():
    texts = ["grant award for storage research",
             "award value and fund value limits",
             "eligibility of organisations"]
    index = build_index(_chunks_from_texts(texts))
    scores = bm25_scores(index, "award value")
    expected = brute_bm25([simple_tokens(t) for t in texts],
                          simple_tokens("award value"))
    for (raw, _), exp in zip(scores, expected):
        assert raw == pytest.approx(exp, abs=1e-9)


def test_bm25_matches_brute_force_random_corpora():
    rng = random.Random(7)
    for _ in range(50):
        texts = [random_words(rng, 3, 10) for _ in range(rng.randint(2, 8))]
        query = random_query(rng)
        index = build_index(_chunks_from_texts(texts))
        got = [raw for raw, _ in bm25_scores(index, query)]
        expected = brute_bm25([simple_tokens(t) for t in texts],
                              simple_tokens(query))
        assert got == pytest.approx(expected, abs=1e-9)


def test_bm25_no_shared_terms_all_zero():
    index = build_index(_chunks_from_texts(["alpha beta", "gamma delta"]))
    assert bm25_scores(index, "zzz qqq") == [(0.0, 0.0), (0.0, 0.0)]


def test_bm25_argmax_normalises_to_one():
    index = build_index(_chunks_from_texts(
        ["award award award", "award other words", "unrelated text"]))
    scores = bm25_scores(index, "award")
    raws = [raw for raw, _ in scores]
    norms = [norm for _, norm in scores]
    assert norms[raws.index(max(raws))] == 1.0
    assert all(0.0 <= n <= 1.0 for n in norms)


def test_empty_index_raises():
    with pytest.raises(EmptyIndex):
        build_index([])


def test_bm25_raw_never_negative():
    # a term present in most chunks would go negative under classic idf
    texts = ["shared words here", "shared words there", "shared words everywhere",
             "different entirely"]
    index = build_index(_chunks_from_texts(texts))
    for raw, norm in bm25_scores(index, "shared words"):
        assert raw >= 0.0 and 0.0 <= norm <= 1.0


# -- dense scorer ---------------------------------------------------------------


def test_dense_self_similarity_is_one():
    scorer = TrigramHashScorer()
    text = "The minimum fund value is 50000 pounds."
    assert scorer.score(text, text) == pytest.approx(1.0)


def test_dense_orthogonal_trigrams_zero():
    scorer = TrigramHashScorer()
    # "aaa" and "bbb" hash to different buckets (45 vs 13)
    assert scorer.score("aaaa", "bbbb") == 0.0


def test_dense_matches_cosine_oracle():
    rng = random.Random(3)
    scorer = TrigramHashScorer()
    for _ in range(5):
        query, text = random_words(rng, 2, 6), random_words(rng, 4, 20)
        assert scorer.score(query, text) == pytest.approx(
            trigram_cosine(query, text), abs=1e-9)


def test_dense_in_unit_interval():
    rng = random.Random(11)
    scorer = TrigramHashScorer()
    for _ in range(50):
        value = scorer.score(random_words(rng), random_words(rng))
        assert 0.0 <= value <= 1.0


# -- hybrid ----------------------------------------------------------------------


def test_hybrid_endpoints_and_arithmetic():
    assert hybrid_combine(1.0, 0.8, 0.3) == 0.8
    assert hybrid_combine(0.0, 0.8, 0.3) == 0.3
    assert hybrid_combine(0.25, 0.4, 0.8) == pytest.approx(0.7, abs=1e-12)


def test_hybrid_rejects_out_of_domain():
    for bad in ((1.5, 0.5, 0.5), (0.5, -0.1, 0.5), (0.5, 0.5, 1.01)):
        with pytest.raises(DomainError):
            hybrid_combine(*bad)


def test_hybrid_matches_formula_on_random_triples():
    rng = random.Random(42)
    for _ in range(1000):
        alpha, bm, dense = rng.random(), rng.random(), rng.random()
        combined = hybrid_combine(alpha, bm, dense)
        assert abs(combined - (alpha * bm + (1 - alpha) * dense)) <= 1e-12
        assert 0.0 <= combined <= 1.0


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_hybrid_bounded_property(alpha, bm, dense):
    assert 0.0 <= hybrid_combine(alpha, bm, dense) <= 1.0 + 1e-12


# -- branch dedup -----------------------------------------------------------------


def _scored(chunk_id, path, depth, score):
    chunk = Chunk(chunk_id=chunk_id, doc_id="d", node_path=path, depth=depth,
                  text="x", word_count=1)
    return ScoredChunk(chunk=chunk, bm25_raw=0, bm25_norm=0, dense=0,
                       hybrid=score)


def test_dedup_discards_lower_scoring_ancestor():
    out = branch_dedup([_scored("root", (), 1, 0.5), _scored("child", (0,), 2, 0.9)])
    assert [s.chunk.chunk_id for s in out] == ["child"]


def test_dedup_keeps_siblings():
    out = branch_dedup([_scored("a", (0,), 2, 0.9), _scored("b", (1,), 2, 0.5)])
    assert [s.chunk.chunk_id for s in out] == ["a", "b"]


def test_dedup_sliding_chunks_pass_through():
    cands = [_scored("w0", (), 0, 0.9), _scored("w1", (), 0, 0.5),
             _scored("w2", (), 0, 0.7)]
    assert branch_dedup(cands) == cands


def test_dedup_chain_keeps_unrelated_low_scorer():
    # parent beats one child; the other child survives because the parent
    # itself was discarded by the stronger sibling
    cands = [_scored("p", (0,), 2, 0.9),
             _scored("c1", (0, 0), 3, 1.0),
             _scored("c2", (0, 1), 3, 0.8)]
    out = branch_dedup(cands)
    assert [s.chunk.chunk_id for s in out] == ["c1", "c2"]


def _is_ancestor(a, b):
    pa, pb = a.chunk.node_path, b.chunk.node_path
    if a.chunk.depth == 0 or b.chunk.depth == 0:
        return False
    shorter, longer = (pa, pb) if len(pa) <= len(pb) else (pb, pa)
    return longer[:len(shorter)] == shorter


def check_dedup_contract(candidates, survivors):
    """Pairwise oracle: survivors form an antichain and every discarded
    chunk has a surviving relative scoring at least as high."""
    surviving_ids = {s.chunk.chunk_id for s in survivors}
    for i, a in enumerate(survivors):
        for b in survivors[i + 1:]:
            assert not _is_ancestor(a, b), "ancestor pair survived"
    for cand in candidates:
        if cand.chunk.chunk_id in surviving_ids:
            continue
        relatives = [s for s in survivors if _is_ancestor(cand, s)]
        assert relatives, f"{cand.chunk.chunk_id} discarded with no surviving relative"
        assert max(r.sort_score for r in relatives) >= cand.sort_score


def test_dedup_random_trees_antichain_and_score_contract():
    rng = random.Random(5)
    for _ in range(60):
        doc = random_doc(rng, "d")
        chunks = chunk_hierarchical(doc)
        sample = rng.sample(chunks, k=rng.randint(1, len(chunks)))
        cands = [ScoredChunk(chunk=c, bm25_raw=0, bm25_norm=0, dense=0,
                             hybrid=round(rng.random(), 3)) for c in sample]
        check_dedup_contract(cands, branch_dedup(cands))


def test_dedup_preserves_survivor_input_order():
    cands = [_scored("b", (1,), 2, 0.5), _scored("a", (0,), 2, 0.9)]
    assert [s.chunk.chunk_id for s in branch_dedup(cands)] == ["b", "a"]


# -- pipeline ----------------------------------------------------------------------


def test_retrieve_fewer_chunks_than_k():
    doc = toy_doc()
    out = retrieve(doc, "storage", RetrievalConfig(k=10, k_final=5))
    assert len(out) <= 3  # 4 chunks, at least one pruned as a relative


def test_retrieve_matches_hand_executed_pipeline():
    """Oracle: re-run the whole pipeline with brute-force pieces."""
    doc = toy_doc()
    config = RetrievalConfig(alpha=0.25)
    chunks = chunk_hierarchical(doc)
    bm_raw = brute_bm25([simple_tokens(c.text) for c in chunks],
                        simple_tokens("minimum fund value"))
    max_raw = max(bm_raw)
    bm_norm = [r / max_raw if max_raw else 0.0 for r in bm_raw]
    dense = [trigram_cosine("minimum fund value", c.text) for c in chunks]
    hybrid = [0.25 * b + 0.75 * d for b, d in zip(bm_norm, dense)]
    order = sorted(range(len(chunks)),
                   key=lambda i: (-hybrid[i], -chunks[i].depth, chunks[i].chunk_id))
    top_k = order[:config.k]
    kept = []
    for i in top_k:
        if not any(_is_ancestor(_scored("x", chunks[i].node_path, chunks[i].depth, 0),
                                _scored("y", chunks[j].node_path, chunks[j].depth, 0))
                   for j in kept):
            kept.append(i)
    expected_ids = [chunks[i].chunk_id for i in kept][:config.k_final]

    got = retrieve(doc, "minimum fund value", config)
    assert [s.chunk.chunk_id for s in got] == expected_ids
    # frozen from a hand-run of this fixture
    assert expected_ids == ["toy#n0002", "toy#n0003"]
    by_id = {s.chunk.chunk_id: s for s in got}
    assert by_id["toy#n0002"].hybrid == pytest.approx(
        hybrid[[c.chunk_id for c in chunks].index("toy#n0002")], abs=1e-9)


class ReversingReranker:
    def rerank(self, query, candidates):
        return list(range(len(candidates)))  # later candidates score higher


def test_reranker_stub_reverses_order_before_dedup():
    doc = _words_doc(500)  # sliding chunks: no ancestry, dedup is a no-op
    config = RetrievalConfig(alpha=1.0, chunker="sliding", use_reranker=True)
    plain = retrieve(doc, "w0001 w0002", RetrievalConfig(alpha=1.0, chunker="sliding"))
    reversed_out = retrieve(doc, "w0001 w0002", config, reranker=ReversingReranker())
    assert [s.chunk.chunk_id for s in reversed_out] == \
        [s.chunk.chunk_id for s in plain][::-1]


def test_passthrough_reranker_preserves_order():
    doc = toy_doc()
    base = retrieve(doc, "minimum fund value", RetrievalConfig(alpha=0.25))
    rr = retrieve(doc, "minimum fund value",
                  RetrievalConfig(alpha=0.25, use_reranker=True),
                  reranker=PassthroughReranker())
    assert [s.chunk.chunk_id for s in rr] == [s.chunk.chunk_id for s in base]


def test_alpha_endpoints_match_single_signal_rankings():
    rng = random.Random(19)
    for _ in range(25):
        doc = random_doc(rng, "d")
        query = random_query(rng)
        index = build_index(chunk_hierarchical(doc))
        for alpha, signal in ((1.0, "bm25_norm"), (0.0, "dense")):
            config = RetrievalConfig(alpha=alpha, k=5, k_final=5)
            ranked = rank_candidates(index, query, config)
            scored = score_chunks(index, query, alpha)
            reference = sorted(
                scored, key=lambda s: (-getattr(s, signal), -s.chunk.depth,
                                       s.chunk.chunk_id))[:config.k]
            assert [s.chunk.chunk_id for s in ranked] == \
                [s.chunk.chunk_id for s in reference]


def test_retrieve_output_bounded_by_k_final():
    rng = random.Random(23)
    for _ in range(20):
        doc = random_doc(rng, "d")
        config = RetrievalConfig(k=4, k_final=2)
        out = retrieve(doc, random_query(rng), config)
        assert len(out) <= config.k_final


def test_scored_chunk_invariant_hybrid_formula():
    rng = random.Random(29)
    doc = random_doc(rng, "d")
    index = build_index(chunk_hierarchical(doc))
    for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
        for s in rank_candidates(index, random_query(rng),
                                 RetrievalConfig(alpha=alpha, k=50, k_final=50)):
            assert abs(s.hybrid - (alpha * s.bm25_norm + (1 - alpha) * s.dense)) <= 1e-12


def test_trace_record_shape():
    doc = toy_doc()
    out = retrieve(doc, "minimum fund value", RetrievalConfig())
    record = trace_record("toy", "minimum fund value", out)
    assert record["doc_id"] == "toy"
    assert {"chunk_id", "bm25_raw", "bm25_norm", "dense", "hybrid", "rerank"} \
        <= set(record["chunks"][0])


def test_config_validation():
    with pytest.raises(DomainError):
        RetrievalConfig(alpha=1.5)
    with pytest.raises(DomainError):
        RetrievalConfig(k=5, k_final=6)
    with pytest.raises(DomainError):
        RetrievalConfig(chunker="bogus")


def test_tokenize_lowercases_and_splits_non_alphanumeric():
    assert tokenize("Award-value: £50,000!") == ("award", "value", "50", "000")
