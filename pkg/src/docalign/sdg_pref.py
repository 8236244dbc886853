"""Build the preference dataset: filter chunks for value content, then
generate faithful/unfaithful answer pairs per surviving chunk.

The filter verdict is decoded greedily (it is a yes/no decision, not a
sample); pair generation samples like question generation does. The
faithful answer always lands in the chosen slot and the unfaithful one
in the rejected slot; that orientation is validated, never inferred.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

from .ingest import Chunk
from .prompts import PREFERENCE_GEN, VALUE_FILTER, RenderContext, render
from .sdg_instruct import SdgStats, _fan_out, parse_jsonl_records
from .teacher import ChatMessage, DecodeParams, TeacherClient

logger = logging.getLogger(__name__)

MAX_NEX = 10
DEFAULT_NEX = 5


@dataclass(frozen=True)
class PreferenceTriple:
    chunk_ref: tuple[str, int]
    question: str
    faithful: str
    unfaithful: str

    def __post_init__(self):
        for name in ("question", "faithful", "unfaithful"):
            value = getattr(self, name)
            if not value or not value.strip():
                raise ValueError(f"{name} must be non-empty")
        if self.faithful == self.unfaithful:
            raise ValueError("faithful and unfaithful answers must differ")


@dataclass(frozen=True)
class PreferenceSample:
    id: str
    prompt: str
    chosen: str
    rejected: str
    chunk_ref: tuple[str, int]


@dataclass
class PrefSdgConfig:
    keyword: str
    nex: int = DEFAULT_NEX
    calls_per_chunk: int = 1
    pair_decode: DecodeParams = field(default_factory=lambda: DecodeParams.nucleus())
    filter_decode: DecodeParams = field(default_factory=lambda: DecodeParams.greedy(max_tokens=8))
    pair_seed: int = 29
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


def parse_filter_verdict(reply: str) -> bool | None:
    """YES/NO from the first token, case-insensitive, tolerating
    trailing punctuation. None when neither parses."""
    tokens = reply.strip().split()
    if not tokens:
        return None
    head = tokens[0].strip(".,!:;\"'").upper()
    if head == "YES":
        return True
    if head == "NO":
        return False
    return None


def value_filter(client: TeacherClient, chunk: Chunk, cfg: PrefSdgConfig) -> bool:
    """True iff the teacher's verdict parses as YES. An unparseable
    verdict counts as a rejection and is logged."""
    prompt = render(
        VALUE_FILTER, RenderContext(passage=chunk.text, keyword=cfg.keyword), cfg.template_dir
    )
    reply = client.chat_complete([ChatMessage("user", prompt)], cfg.filter_decode)
    verdict = parse_filter_verdict(reply)
    if verdict is None:
        logger.warning("unparseable filter verdict for chunk %s: %r", chunk.ref, reply[:80])
        return False
    return verdict


def parse_triples(reply: str, chunk: Chunk) -> tuple[list[PreferenceTriple], int, int]:
    """Extract triples from one reply. Returns (triples, malformed
    lines, ill-formed triples); a triple whose faithful and unfaithful
    answers coincide is ill-formed."""
    records, malformed = parse_jsonl_records(reply, ["question", "faithful", "unfaithful"])
    triples = []
    ill_formed = 0
    for record in records:
        try:
            triples.append(
                PreferenceTriple(
                    chunk_ref=chunk.ref,
                    question=record["question"].strip(),
                    faithful=record["faithful"].strip(),
                    unfaithful=record["unfaithful"].strip(),
                )
            )
        except ValueError:
            ill_formed += 1
    return triples, malformed, ill_formed


def gen_preferences(
    client: TeacherClient, chunk: Chunk, cfg: PrefSdgConfig
) -> tuple[list[PreferenceTriple], int, int]:
    """Pair-generation calls for a single chunk, sequentially."""
    triples: list[PreferenceTriple] = []
    malformed = 0
    ill_formed = 0
    for messages, params in _pair_requests(chunk, cfg):
        reply = client.chat_complete(messages, params)
        parsed, bad, ill = parse_triples(reply, chunk)
        triples.extend(parsed[: cfg.nex])
        malformed += bad
        ill_formed += ill
    return triples, malformed, ill_formed


def to_preference_samples(triples: Sequence[PreferenceTriple]) -> list[PreferenceSample]:
    """Map triples into preference samples: chosen <- faithful,
    rejected <- unfaithful, one sample per triple."""
    samples = []
    line_counter: dict[tuple[str, int], int] = {}
    for t in triples:
        key = (t.chunk_ref[0], t.chunk_ref[1])
        line = line_counter.get(key, 0)
        line_counter[key] = line + 1
        samples.append(
            PreferenceSample(
                id=f"pref-{t.chunk_ref[0]}-{t.chunk_ref[1]:04d}-{line:02d}",
                prompt=t.question,
                chosen=t.faithful,
                rejected=t.unfaithful,
                chunk_ref=t.chunk_ref,
            )
        )
    return samples


def build_pref_dataset(
    client: TeacherClient, chunks: Sequence[Chunk], cfg: PrefSdgConfig
) -> tuple[list[PreferenceSample], SdgStats]:
    """Filter pass, then pair generation over the survivors. Chunks the
    filter rejects are recorded; failed calls mark their chunk failed
    and the build continues."""
    stats = SdgStats(chunks_total=len(chunks))
    chunk_list = list(chunks)

    filter_jobs = []
    for chunk in chunk_list:
        prompt = render(
            VALUE_FILTER, RenderContext(passage=chunk.text, keyword=cfg.keyword), cfg.template_dir
        )
        filter_jobs.append(([ChatMessage("user", prompt)], cfg.filter_decode))

    survivors: list[Chunk] = []
    for chunk, outcome in zip(chunk_list, _fan_out(client, filter_jobs)):
        ok, value = outcome
        if not ok:
            stats.chunks_failed.append(
                {"chunk_ref": list(chunk.ref), "stage": "filter", "error": str(value)}
            )
            continue
        verdict = parse_filter_verdict(value)
        if verdict is None:
            logger.warning("unparseable filter verdict for chunk %s: %r", chunk.ref, value[:80])
        if verdict:
            survivors.append(chunk)
        else:
            stats.chunks_filtered_out.append(chunk.ref)

    pair_jobs = []  # (chunk, messages, params)
    for chunk in survivors:
        for messages, params in _pair_requests(chunk, cfg):
            pair_jobs.append((chunk, messages, params))

    triples: list[PreferenceTriple] = []
    failed_refs = set()
    replies = _fan_out(client, [(m, p) for _, m, p in pair_jobs])
    for (chunk, _, _), outcome in zip(pair_jobs, replies):
        ok, value = outcome
        if not ok:
            if chunk.ref not in failed_refs:
                stats.chunks_failed.append(
                    {"chunk_ref": list(chunk.ref), "stage": "pairs", "error": str(value)}
                )
                failed_refs.add(chunk.ref)
            continue
        parsed, bad, ill = parse_triples(value, chunk)
        triples.extend(parsed[: cfg.nex])
        stats.malformed_lines += bad
        stats.ill_formed += ill

    samples = to_preference_samples(triples)
    stats.samples = len(samples)
    return samples, stats


def _pair_requests(chunk: Chunk, cfg: PrefSdgConfig) -> list[tuple[list[ChatMessage], DecodeParams]]:
    prompt = render(
        PREFERENCE_GEN,
        RenderContext(nex=cfg.nex, keyword=cfg.keyword, passage=chunk.text),
        cfg.template_dir,
    )
    out = []
    for call_id in range(cfg.calls_per_chunk):
        params = cfg.pair_decode
        if params.mode == "nucleus":
            params = replace(params, seed=cfg.pair_seed + call_id)
        out.append(([ChatMessage("user", prompt)], params))
    return out
