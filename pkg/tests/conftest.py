"""Shared fixtures: an in-process mock teacher endpoint, small chunk
corpora, and the acceptance summary printed at the end of the run."""

from __future__ import annotations

import pytest

from docalign.ingest import Chunk, ChunkPolicy, RawDocument, chunk_document
from docalign.mock_teacher import MockTeacherLogic, httpx_handler
from docalign.teacher import RetryPolicy, TeacherClient, TeacherConfig

VALUES_DOC = """# Commitments of the Field Service

## Fair treatment

Every request is handled in the order received, and every requester is
told the expected wait honestly. Staff never trade speed for favoritism,
and exceptions are written down with a reason.

## Care with records

Records are updated the same day the facts change. Nothing is deleted to
tidy a history; corrections are appended so the trail stays auditable.

## Plain answers

Answers quote the governing commitment when one applies. If none
applies, say so plainly instead of inventing a rule.
"""


def make_client(
    tmp_path,
    logic: MockTeacherLogic | None = None,
    cache_name: str = "cache",
    max_attempts: int = 4,
    sleeper=None,
    max_concurrency: int = 4,
) -> tuple[TeacherClient, MockTeacherLogic]:
    """TeacherClient wired to an in-process mock endpoint through
    httpx.MockTransport, with an on-disk cache under tmp_path."""
    import httpx

    logic = logic or MockTeacherLogic()
    config = TeacherConfig(
        base_url="http://teacher.test",
        model_id="mock-teacher",
        embed_model_id="mock-embed",
        cache_dir=tmp_path / cache_name,
        max_concurrency=max_concurrency,
        retry=RetryPolicy(max_attempts=max_attempts),
    )
    client = TeacherClient(
        config,
        transport=httpx.MockTransport(httpx_handler(logic)),
        sleeper=sleeper or (lambda s: None),
    )
    return client, logic


@pytest.fixture
def values_doc_path(tmp_path):
    path = tmp_path / "values.md"
    path.write_text(VALUES_DOC, encoding="utf-8")
    return path


@pytest.fixture
def chunks3(values_doc_path) -> list[Chunk]:
    """Three markdown sections, each under a 64-token budget, minus the
    bare top-level title section."""
    from docalign.ingest import load_document

    doc = load_document(values_doc_path)
    chunks = chunk_document(doc, ChunkPolicy(max_tokens=64))
    body = [c for c in chunks if len(c.section_path) == 2]
    assert len(body) == 3
    return body


@pytest.fixture
def chunks38() -> list[Chunk]:
    """A 38-chunk corpus with distinct vocabulary per chunk."""
    subjects = [
        "archivists", "auditors", "bakers", "botanists", "carpenters",
        "cartographers", "clerks", "couriers", "curators", "dispatchers",
        "divers", "editors", "engineers", "farmers", "foresters",
        "gardeners", "geologists", "glaziers", "harbormasters", "innkeepers",
        "jewelers", "librarians", "machinists", "masons", "millers",
        "navigators", "notaries", "nurses", "orchardists", "printers",
        "ranchers", "sailors", "surveyors", "tailors", "teachers",
        "translators", "weavers", "welders",
    ]
    assert len(subjects) == 38
    doc_text = "\n\n".join(
        f"Article {i + 1} obliges the {subject} to record each undertaking "
        f"faithfully and to disclose article{i + 1}specific duties on request."
        for i, subject in enumerate(subjects)
    )
    doc = RawDocument(doc_id="articles", source_path="memory", format="plain", text=doc_text)
    chunks = chunk_document(doc, ChunkPolicy(max_tokens=32))
    assert len(chunks) == 38
    return chunks


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in results:
        terminalreporter.write_line(("PASS  " if ok else "FAIL  ") + name)
