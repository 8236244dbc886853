"""TF-IDF retrieval baseline and grounded prompt composition."""

from __future__ import annotations

import inspect
import math

import pytest

from conftest import make_client
from docalign.ingest import Chunk
from docalign.rag import (
    DEFAULT_TOP_K,
    RagError,
    build_index,
    compose_rag_prompt,
    rag_answer,
    read_index,
    retrieve,
    tokenize,
    write_index,
)

CORPUS = [
    Chunk("doc", 0, "Requests are handled in arrival order without favoritism.", (), 8),
    Chunk("doc", 1, "Records are corrected by appending, never by deleting history.", (), 9),
    Chunk("doc", 2, "Answers quote the governing commitment whenever one applies.", (), 8),
]


def test_tokenize_lowercases_and_splits():
    assert tokenize("Hello, World! Case 12b.") == ["hello", "world", "case", "12b"]
    assert tokenize("") == []


def test_default_k_is_one():
    assert DEFAULT_TOP_K == 1
    assert inspect.signature(retrieve).parameters["k"].default == 1


def test_build_index_counts_and_determinism():
    index = build_index(CORPUS)
    again = build_index(CORPUS)
    assert index.size == 3
    assert index.mode == "lexical"
    assert index.idf == again.idf
    assert index.doc_vectors == again.doc_vectors


def test_build_index_rejects_empty():
    with pytest.raises(RagError, match="empty corpus"):
        build_index([])


def test_idf_formula():
    index = build_index(CORPUS)
    n = len(CORPUS)
    df_are = sum(1 for c in CORPUS if "are" in tokenize(c.text))
    assert df_are == 2
    assert index.idf["are"] == math.log((1 + n) / (1 + df_are)) + 1.0
    assert index.idf["favoritism"] == math.log((1 + n) / 2) + 1.0


def test_doc_vectors_are_unit_length():
    index = build_index(CORPUS)
    for vec in index.doc_vectors:
        assert math.fsum(w * w for w in vec.values()) == pytest.approx(1.0, abs=1e-12)


def test_self_retrieval_rank_one():
    index = build_index(CORPUS)
    for chunk in CORPUS:
        hits = retrieve(index, chunk.text)
        assert len(hits) == 1
        assert hits[0].rank == 1
        assert hits[0].chunk == chunk
        assert hits[0].score == pytest.approx(1.0, abs=1e-9)


def test_self_retrieval_on_38_chunk_corpus(chunks38):
    index = build_index(chunks38)
    assert index.size == 38
    hit_self = sum(
        1 for chunk in chunks38 if retrieve(index, chunk.text)[0].chunk == chunk
    )
    assert hit_self == 38


def test_retrieval_ranks_by_similarity():
    index = build_index(CORPUS)
    hits = retrieve(index, "who corrects the records history", k=3)
    assert hits[0].chunk.index == 1
    assert [h.rank for h in hits] == [1, 2, 3]
    assert hits[0].score >= hits[1].score >= hits[2].score


def test_ties_prefer_lower_chunk_index():
    twins = [
        Chunk("doc", 0, "identical twin text body", (), 4),
        Chunk("doc", 1, "identical twin text body", (), 4),
    ]
    index = build_index(twins)
    hits = retrieve(index, "identical twin text body", k=2)
    assert [h.chunk.index for h in hits] == [0, 1]


def test_out_of_vocabulary_query_returns_empty(caplog):
    index = build_index(CORPUS)
    with caplog.at_level("WARNING"):
        assert retrieve(index, "zymurgy quokka") == []
    assert any("no" in m.lower() for m in caplog.messages)


def test_k_validation():
    index = build_index(CORPUS)
    with pytest.raises(ValueError, match="k must be"):
        retrieve(index, "records", k=0)


def test_k_caps_at_corpus_size():
    index = build_index(CORPUS)
    assert len(retrieve(index, "records are handled", k=10)) == 3


def test_embedding_mode_round_trip(tmp_path):
    client, _ = make_client(tmp_path)
    index = build_index(CORPUS, mode="embedding", embedder=client.embed)
    assert index.mode == "embedding"
    assert len(index.embeddings) == 3
    hits = retrieve(index, CORPUS[1].text, k=1, embedder=client.embed)
    assert hits[0].chunk == CORPUS[1]


def test_embedding_mode_requires_embedder():
    with pytest.raises(RagError, match="embedder"):
        build_index(CORPUS, mode="embedding")
    with pytest.raises(RagError, match="unknown index mode"):
        build_index(CORPUS, mode="ann")


def test_compose_rag_prompt_grounded():
    index = build_index(CORPUS)
    (hit,) = retrieve(index, "append to records")
    prompt = compose_rag_prompt("How are records fixed?", hit)
    assert prompt.grounded
    assert prompt.chunk_ref == hit.chunk.ref
    assert hit.chunk.text in prompt.text
    assert "no prior knowledge" in prompt.text
    assert "How are records fixed?" in prompt.text


def test_compose_rag_prompt_fallback(caplog):
    with caplog.at_level("WARNING"):
        prompt = compose_rag_prompt("Unanswerable thing?", None)
    assert not prompt.grounded
    assert prompt.chunk_ref is None
    assert prompt.text == "Unanswerable thing?"


def test_rag_answer_uses_retrieved_chunk(tmp_path):
    client, logic = make_client(tmp_path)
    index = build_index(CORPUS)
    reply, prompt = rag_answer(client, index, "How are records corrected?")
    assert prompt.grounded
    assert reply
    sent = logic.requests[-1]["payload"]["messages"][0]["content"]
    assert sent == prompt.text
    assert logic.requests[-1]["payload"]["temperature"] == 0.0


def test_index_persistence_round_trip(tmp_path):
    index = build_index(CORPUS)
    path = tmp_path / "index.json"
    write_index(index, path)
    loaded = read_index(path)
    assert loaded.mode == index.mode
    assert loaded.chunks == index.chunks
    assert loaded.idf == index.idf
    assert loaded.doc_vectors == index.doc_vectors
    for chunk in CORPUS:
        assert retrieve(loaded, chunk.text)[0].chunk == chunk


def test_read_index_rejects_garbage(tmp_path):
    path = tmp_path / "index.json"
    path.write_text("not json", encoding="utf-8")
    with pytest.raises(RagError, match="unreadable index file"):
        read_index(path)
