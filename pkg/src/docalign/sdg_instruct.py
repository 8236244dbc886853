"""Build the grounded instruct dataset: questions per chunk, then an
answer per question with the chunk as the only context.

Questions are sampled (nucleus) so repeated calls per chunk diversify;
answers are decoded greedily so they stay deterministic given the
question. Each extra call per chunk gets its own sampler seed, which
also keeps the calls distinct under the client's content-addressed
cache. Work fans out across chunks up to the teacher concurrency
ceiling; assembly order is fixed by (chunk order, call id, line number)
so output never depends on completion order.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

from .ingest import Chunk
from .prompts import ANSWER_GEN, QUESTION_GEN, RenderContext, render
from .teacher import ChatMessage, DecodeParams, TeacherClient, TeacherError

logger = logging.getLogger(__name__)

CHAT_FORMAT_VERSION = "chat.v1"

MAX_NEX = 10
DEFAULT_NEX = 5


@dataclass(frozen=True)
class Question:
    chunk_ref: tuple[str, int]
    call_id: int
    text: str

    def __post_init__(self):
        if not is_plausible_question(self.text):
            raise ValueError(f"implausible question text: {self.text!r}")


@dataclass(frozen=True)
class InstructSample:
    id: str
    question: str
    answer: str
    chunk_ref: tuple[str, int]
    chat_format_version: str = CHAT_FORMAT_VERSION


@dataclass
class InstructSdgConfig:
    keyword: str
    nex: int = DEFAULT_NEX
    calls_per_chunk: int = 1
    question_decode: DecodeParams = field(default_factory=lambda: DecodeParams.nucleus())
    answer_decode: DecodeParams = field(default_factory=DecodeParams.greedy)
    question_seed: int = 17
    template_dir: str | None = None

    def __post_init__(self):
        if not self.keyword or not self.keyword.strip():
            raise ValueError("keyword must be non-empty")
        if not (1 <= self.nex <= MAX_NEX):
            raise ValueError(f"nex must be in [1, {MAX_NEX}], got {self.nex}")
        if self.nex > DEFAULT_NEX:
            logger.warning("nex=%d is above the validated default of %d", self.nex, DEFAULT_NEX)
        if self.calls_per_chunk < 1:
            raise ValueError("calls_per_chunk must be >= 1")


@dataclass
class SdgStats:
    """Generation accounting, shared by the instruct and preference
    builders. chunks_failed entries are {"chunk_ref", "stage", "error"}."""

    chunks_total: int = 0
    chunks_failed: list = field(default_factory=list)
    chunks_filtered_out: list = field(default_factory=list)
    malformed_lines: int = 0
    ill_formed: int = 0
    samples: int = 0

    def as_dict(self) -> dict:
        return {
            "chunks_total": self.chunks_total,
            "chunks_failed": self.chunks_failed,
            "chunks_filtered_out": [list(ref) for ref in self.chunks_filtered_out],
            "malformed_lines": self.malformed_lines,
            "ill_formed": self.ill_formed,
            "samples": self.samples,
        }


def is_plausible_question(text: str) -> bool:
    """Cheap shape check, deliberately not semantic: non-blank, has
    letters, and either ends in '?' or is long enough to be a scenario
    instruction."""
    s = text.strip()
    if not s or not any(c.isalpha() for c in s):
        return False
    return s.endswith("?") or len(s.split()) >= 3


def parse_jsonl_records(text: str, required_keys: Sequence[str]) -> tuple[list[dict], int]:
    """Parse a model reply as JSONL with the given required string
    fields. Blank lines and code-fence chrome are skipped silently;
    anything else unparseable is dropped and counted."""
    records: list[dict] = []
    malformed = 0
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("```"):
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            malformed += 1
            continue
        if not isinstance(record, dict) or any(
            not isinstance(record.get(k), str) or not record[k].strip() for k in required_keys
        ):
            malformed += 1
            continue
        records.append(record)
    return records, malformed


def question_requests(
    chunk: Chunk, cfg: InstructSdgConfig
) -> list[tuple[list[ChatMessage], DecodeParams]]:
    """One request per call id; nucleus calls get distinct seeds."""
    prompt = render(
        QUESTION_GEN,
        RenderContext(nex=cfg.nex, keyword=cfg.keyword, passage=chunk.text),
        cfg.template_dir,
    )
    out = []
    for call_id in range(cfg.calls_per_chunk):
        params = cfg.question_decode
        if params.mode == "nucleus":
            params = replace(params, seed=cfg.question_seed + call_id)
        out.append(([ChatMessage("user", prompt)], params))
    return out


def parse_questions(reply: str, chunk: Chunk, call_id: int, nex: int) -> tuple[list[Question], int]:
    """Extract at most nex questions from one reply; malformed JSONL
    lines and implausible question texts are dropped and counted."""
    records, malformed = parse_jsonl_records(reply, ["question"])
    questions = []
    for record in records:
        text = record["question"].strip()
        if not is_plausible_question(text):
            malformed += 1
            continue
        questions.append(Question(chunk_ref=chunk.ref, call_id=call_id, text=text))
        if len(questions) == nex:
            break
    return questions, malformed


def gen_questions(
    client: TeacherClient, chunk: Chunk, cfg: InstructSdgConfig
) -> tuple[list[Question], int]:
    """Question calls for a single chunk, sequentially. Raises
    TeacherError if any call fails after retries."""
    questions: list[Question] = []
    malformed = 0
    for call_id, (messages, params) in enumerate(question_requests(chunk, cfg)):
        reply = client.chat_complete(messages, params)
        parsed, bad = parse_questions(reply, chunk, call_id, cfg.nex)
        questions.extend(parsed)
        malformed += bad
    return questions, malformed


def gen_answer(client: TeacherClient, chunk: Chunk, question: str, cfg: InstructSdgConfig) -> str:
    """Grounded answer for one question; empty replies come back as ''
    for the caller to reject."""
    prompt = render(ANSWER_GEN, RenderContext(passage=chunk.text, question=question), cfg.template_dir)
    reply = client.chat_complete([ChatMessage("user", prompt)], cfg.answer_decode)
    return reply.strip()


def build_sft_dataset(
    client: TeacherClient, chunks: Sequence[Chunk], cfg: InstructSdgConfig
) -> tuple[list[InstructSample], SdgStats]:
    """Two fan-out phases: questions for every (chunk, call), then
    answers for every parsed question. A chunk whose call fails after
    retries is recorded in the stats and the build continues; samples
    from its successful calls are kept."""
    stats = SdgStats(chunks_total=len(chunks))
    chunk_list = list(chunks)
    by_ref = {c.ref: c for c in chunk_list}

    question_jobs = []  # (chunk, call_id, messages, params)
    for chunk in chunk_list:
        for call_id, (messages, params) in enumerate(question_requests(chunk, cfg)):
            question_jobs.append((chunk, call_id, messages, params))

    replies = _fan_out(client, [(m, p) for _, _, m, p in question_jobs])

    questions: list[Question] = []
    failed_refs = set()
    for (chunk, call_id, _, _), outcome in zip(question_jobs, replies):
        ok, value = outcome
        if not ok:
            stats.chunks_failed.append(
                {"chunk_ref": list(chunk.ref), "stage": "question", "error": str(value)}
            )
            failed_refs.add(chunk.ref)
            continue
        parsed, bad = parse_questions(value, chunk, call_id, cfg.nex)
        questions.extend(parsed)
        stats.malformed_lines += bad

    answer_jobs = []
    for q in questions:
        chunk = by_ref[q.chunk_ref]
        prompt = render(
            ANSWER_GEN, RenderContext(passage=chunk.text, question=q.text), cfg.template_dir
        )
        answer_jobs.append(([ChatMessage("user", prompt)], cfg.answer_decode))

    answers = _fan_out(client, answer_jobs)

    samples: list[InstructSample] = []
    line_counter: dict[tuple[str, int, int], int] = {}
    for q, outcome in zip(questions, answers):
        ok, value = outcome
        if not ok:
            if q.chunk_ref not in failed_refs:
                stats.chunks_failed.append(
                    {"chunk_ref": list(q.chunk_ref), "stage": "answer", "error": str(value)}
                )
                failed_refs.add(q.chunk_ref)
            continue
        answer = value.strip()
        if not answer:
            stats.ill_formed += 1
            continue
        key = (q.chunk_ref[0], q.chunk_ref[1], q.call_id)
        line = line_counter.get(key, 0)
        line_counter[key] = line + 1
        samples.append(
            InstructSample(
                id=f"sft-{q.chunk_ref[0]}-{q.chunk_ref[1]:04d}-{q.call_id:02d}-{line:02d}",
                question=q.text,
                answer=answer,
                chunk_ref=q.chunk_ref,
            )
        )
    stats.samples = len(samples)
    return samples, stats


def _fan_out(
    client: TeacherClient, jobs: Sequence[tuple[list[ChatMessage], DecodeParams]]
) -> list[tuple[bool, str | Exception]]:
    """Run chat jobs concurrently, capturing per-job teacher failures so
    one bad chunk cannot abort the batch. Results in submission order."""
    if not jobs:
        return []

    def run(job):
        messages, params = job
        try:
            return True, client.chat_complete(messages, params)
        except TeacherError as exc:
            return False, exc

    with ThreadPoolExecutor(max_workers=client.config.max_concurrency) as pool:
        return list(pool.map(run, jobs))
