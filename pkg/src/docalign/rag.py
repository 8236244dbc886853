"""Chunk retrieval baseline: TF-IDF cosine by default, teacher
embeddings optionally, one retrieved chunk by default.

The lexical path is self-contained and fully deterministic: ties break
toward the lower chunk index, vocabulary is sorted before weights are
assigned, and the persisted index reloads to an identical structure. A
query sharing no vocabulary with the corpus retrieves nothing rather
than something arbitrary.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .ingest import Chunk
from .prompts import ANSWER_GEN, RenderContext, render
from .teacher import ChatMessage, DecodeParams, TeacherClient

logger = logging.getLogger(__name__)

DEFAULT_TOP_K = 1

_WORD = re.compile(r"[a-z0-9]+")

Embedder = Callable[[Sequence[str]], list[list[float]]]


class RagError(Exception):
    pass


@dataclass(frozen=True)
class RetrievalHit:
    chunk: Chunk
    score: float
    rank: int


@dataclass(frozen=True)
class RagPrompt:
    text: str
    grounded: bool
    chunk_ref: tuple[str, int] | None


@dataclass
class ChunkIndex:
    mode: str  # "lexical" | "embedding"
    chunks: list[Chunk]
    idf: dict[str, float]
    doc_vectors: list[dict[str, float]]  # lexical: unit tf-idf per chunk
    embeddings: list[list[float]]  # embedding: unit vector per chunk

    @property
    def size(self) -> int:
        return len(self.chunks)


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def build_index(chunks: Sequence[Chunk], mode: str = "lexical", embedder: Embedder | None = None) -> ChunkIndex:
    """Index a chunk corpus. Embedding mode needs an embedder callable
    (texts -> vectors), typically TeacherClient.embed."""
    chunks = list(chunks)
    if not chunks:
        raise RagError("cannot index an empty corpus")
    if mode == "lexical":
        token_lists = [tokenize(c.text) for c in chunks]
        df: dict[str, int] = {}
        for tokens in token_lists:
            for term in set(tokens):
                df[term] = df.get(term, 0) + 1
        n = len(chunks)
        idf = {term: math.log((1 + n) / (1 + df[term])) + 1.0 for term in sorted(df)}
        doc_vectors = [_unit_tfidf(tokens, idf) for tokens in token_lists]
        return ChunkIndex(mode="lexical", chunks=chunks, idf=idf, doc_vectors=doc_vectors, embeddings=[])
    if mode == "embedding":
        if embedder is None:
            raise RagError("embedding mode requires an embedder")
        vectors = embedder([c.text for c in chunks])
        return ChunkIndex(
            mode="embedding",
            chunks=chunks,
            idf={},
            doc_vectors=[],
            embeddings=[_unit_vector(v) for v in vectors],
        )
    raise RagError(f"unknown index mode: {mode!r}")


def retrieve(
    index: ChunkIndex, query: str, k: int = DEFAULT_TOP_K, embedder: Embedder | None = None
) -> list[RetrievalHit]:
    """Top-k chunks by cosine similarity; ties prefer the lower chunk
    index. Returns [] (with a warning) when the query has no usable
    signal against the corpus."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.mode == "lexical":
        qvec = _unit_tfidf(tokenize(query), index.idf)
        if not qvec:
            logger.warning("query shares no vocabulary with the corpus; nothing retrieved")
            return []
        scores = [_sparse_dot(qvec, dv) for dv in index.doc_vectors]
    else:
        if embedder is None:
            raise RagError("embedding mode retrieval requires an embedder")
        qv = _unit_vector(embedder([query])[0])
        if not any(qv):
            logger.warning("query embedded to a zero vector; nothing retrieved")
            return []
        scores = [sum(a * b for a, b in zip(qv, dv)) for dv in index.embeddings]
    ranked = sorted(range(index.size), key=lambda i: (-scores[i], index.chunks[i].index))
    return [
        RetrievalHit(chunk=index.chunks[i], score=scores[i], rank=rank + 1)
        for rank, i in enumerate(ranked[: min(k, index.size)])
    ]


def compose_rag_prompt(query: str, hit: RetrievalHit | None, template_dir: str | Path | None = None) -> RagPrompt:
    """Grounded answer prompt from a retrieval hit; with no hit the
    query passes through bare, flagged as ungrounded."""
    if hit is None:
        logger.warning("no retrieval hit; composing ungrounded prompt")
        return RagPrompt(text=query, grounded=False, chunk_ref=None)
    text = render(
        ANSWER_GEN,
        RenderContext(passage=hit.chunk.text, question=query),
        template_dir,
    )
    return RagPrompt(text=text, grounded=True, chunk_ref=hit.chunk.ref)


def rag_answer(
    client: TeacherClient,
    index: ChunkIndex,
    query: str,
    k: int = DEFAULT_TOP_K,
    decode: DecodeParams | None = None,
    template_dir: str | Path | None = None,
) -> tuple[str, RagPrompt]:
    """Retrieve, compose, and answer greedily. Returns the reply and the
    prompt actually used (which records groundedness)."""
    embedder = client.embed if index.mode == "embedding" else None
    hits = retrieve(index, query, k=k, embedder=embedder)
    prompt = compose_rag_prompt(query, hits[0] if hits else None, template_dir)
    reply = client.chat_complete([ChatMessage("user", prompt.text)], decode or DecodeParams.greedy())
    return reply, prompt


# === Persistence ===


def write_index(index: ChunkIndex, path: str | Path) -> Path:
    payload = {
        "mode": index.mode,
        "chunks": [
            {
                "doc_id": c.doc_id,
                "index": c.index,
                "section_path": list(c.section_path),
                "text": c.text,
                "token_estimate": c.token_estimate,
            }
            for c in index.chunks
        ],
        "idf": index.idf,
        "doc_vectors": index.doc_vectors,
        "embeddings": index.embeddings,
    }
    path = Path(path)
    path.write_text(json.dumps(payload, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def read_index(path: str | Path) -> ChunkIndex:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        chunks = [
            Chunk(
                doc_id=c["doc_id"],
                index=int(c["index"]),
                text=c["text"],
                section_path=tuple(c["section_path"]),
                token_estimate=int(c["token_estimate"]),
            )
            for c in payload["chunks"]
        ]
        return ChunkIndex(
            mode=payload["mode"],
            chunks=chunks,
            idf={k: float(v) for k, v in payload["idf"].items()},
            doc_vectors=[{k: float(v) for k, v in dv.items()} for dv in payload["doc_vectors"]],
            embeddings=[[float(x) for x in v] for v in payload["embeddings"]],
        )
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise RagError(f"unreadable index file {path}: {exc}") from None


# === Vector helpers ===


def _unit_tfidf(tokens: list[str], idf: dict[str, float]) -> dict[str, float]:
    counts: dict[str, int] = {}
    for token in tokens:
        if token in idf:
            counts[token] = counts.get(token, 0) + 1
    vec = {term: count * idf[term] for term, count in sorted(counts.items())}
    norm = math.sqrt(math.fsum(w * w for w in vec.values()))
    if norm == 0.0:
        return {}
    return {term: w / norm for term, w in vec.items()}


def _sparse_dot(a: dict[str, float], b: dict[str, float]) -> float:
    if len(b) < len(a):
        a, b = b, a
    return math.fsum(w * b[t] for t, w in a.items() if t in b)


def _unit_vector(v: Sequence[float]) -> list[float]:
    norm = math.sqrt(math.fsum(x * x for x in v))
    if norm == 0.0:
        return [0.0 for _ in v]
    return [x / norm for x in v]
