"""Load a values document and cut it into retrieval-sized chunks.

Chunks are contiguous substrings of the normalized document text, so a
chunk can always be located in (and quoted from) its source. Markdown
headings open a new chunk and contribute to a hierarchical section path;
inside a section, paragraphs are packed greedily up to the token budget,
oversized paragraphs fall back to sentence boundaries, and oversized
sentences are cut into hard token windows.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

_FORMATS = ("plain", "markdown")
_ESTIMATORS = ("whitespace", "chars_div4")
_MIN_BUDGET = 32

_CONTROL_CHARS = re.compile(r"[\x00-\x08\x0b\x0c\x0e-\x1f\x7f]")
_HEADING = re.compile(r"^(#{1,6})\s+(.*?)\s*$")
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
_TOKEN = re.compile(r"\S+")


class DocumentError(Exception):
    """Raised for unreadable, empty, or malformed document input."""


@dataclass(frozen=True)
class RawDocument:
    doc_id: str
    source_path: str
    format: str
    text: str

    def __post_init__(self):
        if self.format not in _FORMATS:
            raise DocumentError(f"unknown document format: {self.format!r}")


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    index: int
    text: str
    section_path: tuple[str, ...] = ()
    token_estimate: int = 0

    @property
    def ref(self) -> tuple[str, int]:
        return (self.doc_id, self.index)


@dataclass(frozen=True)
class ChunkPolicy:
    max_tokens: int = 512
    split_on_headings: bool = True
    token_estimator: str = "whitespace"

    def __post_init__(self):
        if self.max_tokens < _MIN_BUDGET:
            raise ValueError(f"max_tokens must be >= {_MIN_BUDGET}, got {self.max_tokens}")
        if self.token_estimator not in _ESTIMATORS:
            raise ValueError(f"unknown token_estimator: {self.token_estimator!r}")

    def estimate(self, text: str) -> int:
        if self.token_estimator == "whitespace":
            return len(text.split())
        return max(1, math.ceil(len(text) / 4))


def normalize_text(text: str) -> str:
    """Normalize line endings to \\n and strip control characters other
    than newline and tab."""
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    return _CONTROL_CHARS.sub("", text)


def load_document(path: str | Path, format: str | None = None, doc_id: str | None = None) -> RawDocument:
    """Read a UTF-8 document from disk and normalize its text.

    The format is inferred from the file suffix (.md/.markdown) when not
    given. Raises DocumentError if the file is missing, not UTF-8, or
    empty after normalization.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DocumentError(f"document not found: {path}") from None
    except UnicodeDecodeError as exc:
        raise DocumentError(f"document is not valid UTF-8: {path}: {exc}") from None
    if format is None:
        format = "markdown" if path.suffix.lower() in (".md", ".markdown") else "plain"
    text = normalize_text(raw)
    if not text.strip():
        raise DocumentError("empty document")
    return RawDocument(
        doc_id=doc_id or path.stem,
        source_path=str(path),
        format=format,
        text=text,
    )


def chunk_document(doc: RawDocument, policy: ChunkPolicy | None = None) -> list[Chunk]:
    """Cut a document into chunks under the policy's token budget.

    Every chunk is non-empty, fits the budget under the policy's
    estimator, carries the heading stack in force at its position, and is
    a contiguous (stripped) substring of the normalized text. Indices are
    contiguous from zero. Deterministic for a given document and policy.
    """
    policy = policy or ChunkPolicy()
    text = doc.text
    chunks: list[Chunk] = []
    for section_path, start, end in _section_spans(doc):
        atoms = list(_atom_spans(text, start, end, policy))
        for s, e in _pack_spans(text, atoms, policy):
            piece = text[s:e].strip()
            if not piece:
                continue
            chunks.append(
                Chunk(
                    doc_id=doc.doc_id,
                    index=len(chunks),
                    text=piece,
                    section_path=tuple(section_path),
                    token_estimate=policy.estimate(piece),
                )
            )
    if not chunks:
        logger.warning("document %s produced no chunks", doc.doc_id)
    return chunks


def _section_spans(doc: RawDocument):
    """Yield (section_path, start, end) spans; headings open a new span
    and stay part of their section's text."""
    text = doc.text
    if doc.format != "markdown":
        yield [], 0, len(text)
        return
    boundaries = []  # (offset, level, title)
    offset = 0
    for line in text.split("\n"):
        m = _HEADING.match(line)
        if m:
            title = m.group(2).rstrip("#").strip()
            boundaries.append((offset, len(m.group(1)), title))
        offset += len(line) + 1
    if not boundaries:
        yield [], 0, len(text)
        return
    if boundaries[0][0] > 0:
        yield [], 0, boundaries[0][0]
    stack: list[tuple[int, str]] = []
    for i, (start, level, title) in enumerate(boundaries):
        while stack and stack[-1][0] >= level:
            stack.pop()
        stack.append((level, title))
        end = boundaries[i + 1][0] if i + 1 < len(boundaries) else len(text)
        yield [t for _, t in stack], start, end


def _atom_spans(text: str, start: int, end: int, policy: ChunkPolicy):
    """Yield spans that each fit the budget: paragraphs, then sentences,
    then hard token windows."""
    for ps, pe in _paragraph_spans(text, start, end):
        if _fits(text, ps, pe, policy):
            yield ps, pe
            continue
        for ss, se in _sentence_spans(text, ps, pe):
            if _fits(text, ss, se, policy):
                yield ss, se
            else:
                yield from _token_windows(text, ss, se, policy)


def _paragraph_spans(text: str, start: int, end: int):
    """Spans of maximal runs of non-blank lines within [start, end)."""
    span_start = None
    offset = start
    for line in text[start:end].split("\n"):
        line_end = offset + len(line)
        if line.strip():
            if span_start is None:
                span_start = offset
            last_content_end = line_end
        elif span_start is not None:
            yield span_start, last_content_end
            span_start = None
        offset = line_end + 1
    if span_start is not None:
        yield span_start, last_content_end


def _sentence_spans(text: str, start: int, end: int):
    prev = start
    for m in _SENTENCE_END.finditer(text, start, end):
        yield prev, m.start()
        prev = m.end()
    if prev < end:
        yield prev, end


def _token_windows(text: str, start: int, end: int, policy: ChunkPolicy):
    tokens = [m.span() for m in _TOKEN.finditer(text, start, end)]
    if not tokens:
        return
    if policy.token_estimator == "whitespace":
        for i in range(0, len(tokens), policy.max_tokens):
            window = tokens[i : i + policy.max_tokens]
            yield window[0][0], window[-1][1]
        return
    # chars_div4: the estimate is ceil(len/4), so a span fits iff its
    # character length is at most 4 * max_tokens.
    limit = 4 * policy.max_tokens
    ws = None
    we = None
    for ts, te in tokens:
        if te - ts > limit:
            if ws is not None:
                yield ws, we
                ws = we = None
            for o in range(ts, te, limit):
                yield o, min(o + limit, te)
            continue
        if ws is None:
            ws, we = ts, te
        elif te - ws <= limit:
            we = te
        else:
            yield ws, we
            ws, we = ts, te
    if ws is not None:
        yield ws, we


def _pack_spans(text: str, atoms: list[tuple[int, int]], policy: ChunkPolicy):
    """Greedily merge adjacent atom spans while the combined stripped
    slice still fits the budget."""
    current = None
    for s, e in atoms:
        if current is None:
            current = (s, e)
        elif _fits(text, current[0], e, policy):
            current = (current[0], e)
        else:
            yield current
            current = (s, e)
    if current is not None:
        yield current


def _fits(text: str, start: int, end: int, policy: ChunkPolicy) -> bool:
    return policy.estimate(text[start:end].strip()) <= policy.max_tokens


def write_chunks_jsonl(chunks: list[Chunk], path: str | Path) -> Path:
    """Write one record per chunk: {doc_id, index, section_path, text}."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for chunk in chunks:
            record = {
                "doc_id": chunk.doc_id,
                "index": chunk.index,
                "section_path": list(chunk.section_path),
                "text": chunk.text,
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    return path


def read_chunks_jsonl(path: str | Path, token_estimator: str = "whitespace") -> list[Chunk]:
    """Read chunks back; token estimates are recomputed with the given
    estimator since the file stores only the four schema fields."""
    policy = ChunkPolicy(token_estimator=token_estimator)
    chunks = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                chunks.append(
                    Chunk(
                        doc_id=record["doc_id"],
                        index=int(record["index"]),
                        text=record["text"],
                        section_path=tuple(record["section_path"]),
                        token_estimate=policy.estimate(record["text"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DocumentError(f"bad chunk record at {path}:{lineno}: {exc}") from None
    return chunks
