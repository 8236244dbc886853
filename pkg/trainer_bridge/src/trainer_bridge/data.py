"""Readers for the exported dataset files and batch encoding.

Two input schemas are accepted, one JSON object per line:

  chat form       {"id", "messages": [{"role": "user", "content"},
                   {"role": "assistant", "content"}], ...}
  pair form       {"id", "prompt", "chosen", "rejected", ...}

Extra keys (chunk provenance and the like) are ignored; missing or
malformed fields raise BridgeDataError with the offending line number.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import torch

from trainer_bridge.errors import BridgeDataError
from trainer_bridge.vocab import PAD_ID, encode_pair

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChatExample:
    id: str
    prompt: str
    completion: str


@dataclass(frozen=True)
class PairExample:
    id: str
    prompt: str
    chosen: str
    rejected: str


def _iter_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BridgeDataError(f"{path}:{lineno}: not valid JSON: {exc}") from None
            if not isinstance(record, dict):
                raise BridgeDataError(f"{path}:{lineno}: record must be a JSON object")
            yield lineno, record


def _text_field(record: dict, key: str, path: Path, lineno: int) -> str:
    value = record.get(key)
    if not isinstance(value, str) or not value:
        raise BridgeDataError(f"{path}:{lineno}: {key!r} must be a non-empty string")
    return value


def load_chat_dataset(path: str | Path) -> list[ChatExample]:
    """Read a chat-format instruct dataset (one user turn, one
    assistant turn per record)."""
    path = Path(path)
    if not path.is_file():
        raise BridgeDataError(f"dataset not found: {path}")
    examples = []
    for lineno, record in _iter_jsonl(path):
        sample_id = _text_field(record, "id", path, lineno)
        messages = record.get("messages")
        if (
            not isinstance(messages, list)
            or len(messages) != 2
            or not all(isinstance(m, dict) for m in messages)
            or messages[0].get("role") != "user"
            or messages[1].get("role") != "assistant"
        ):
            raise BridgeDataError(
                f"{path}:{lineno}: 'messages' must be exactly one user turn then one assistant turn"
            )
        prompt = messages[0].get("content")
        completion = messages[1].get("content")
        if not isinstance(prompt, str) or not prompt:
            raise BridgeDataError(f"{path}:{lineno}: user content must be a non-empty string")
        if not isinstance(completion, str) or not completion:
            raise BridgeDataError(f"{path}:{lineno}: assistant content must be a non-empty string")
        examples.append(ChatExample(id=sample_id, prompt=prompt, completion=completion))
    if not examples:
        logger.warning("chat dataset %s is empty", path)
    return examples


def load_pair_dataset(path: str | Path) -> list[PairExample]:
    """Read a preference dataset of prompt/chosen/rejected triples."""
    path = Path(path)
    if not path.is_file():
        raise BridgeDataError(f"dataset not found: {path}")
    examples = []
    for lineno, record in _iter_jsonl(path):
        examples.append(
            PairExample(
                id=_text_field(record, "id", path, lineno),
                prompt=_text_field(record, "prompt", path, lineno),
                chosen=_text_field(record, "chosen", path, lineno),
                rejected=_text_field(record, "rejected", path, lineno),
            )
        )
    if not examples:
        logger.warning("pair dataset %s is empty", path)
    return examples


@dataclass
class EncodedBatch:
    """Padded token ids plus the mask of scored positions."""

    ids: torch.Tensor  # (batch, seq) int64
    score_mask: torch.Tensor  # (batch, seq) bool


def encode_batch(pairs: Sequence[tuple[str, str]], max_len: int) -> EncodedBatch:
    """Encode (prompt, completion) pairs into one right-padded batch."""
    if not pairs:
        raise BridgeDataError("cannot encode an empty batch")
    encoded = []
    for prompt, completion in pairs:
        try:
            ids, start = encode_pair(prompt, completion, max_len)
        except ValueError as exc:
            raise BridgeDataError(str(exc)) from None
        encoded.append((ids, start))
    width = max(len(ids) for ids, _ in encoded)
    id_rows = []
    mask_rows = []
    for ids, start in encoded:
        pad = width - len(ids)
        id_rows.append(ids + [PAD_ID] * pad)
        row = [False] * width
        for pos in range(start, len(ids)):
            row[pos] = True
        mask_rows.append(row)
    return EncodedBatch(
        ids=torch.tensor(id_rows, dtype=torch.long),
        score_mask=torch.tensor(mask_rows, dtype=torch.bool),
    )
