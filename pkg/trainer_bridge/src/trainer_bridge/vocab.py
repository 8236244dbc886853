"""Byte-level vocabulary shared by every model in this package.

Token ids 0..255 are raw UTF-8 bytes; the four ids above them are
control tokens. A prompt/completion pair is laid out as

    BOS <prompt bytes> SEP <completion bytes> EOS

and the training loss covers everything after SEP. Keeping the
vocabulary fixed means any two checkpoints from this package tokenize
identically, which the scoring job depends on.
"""

from __future__ import annotations

BYTE_VOCAB = 256
PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
SEP_ID = 259
VOCAB_SIZE = 260


def encode_text(text: str) -> list[int]:
    """UTF-8 bytes of the text as token ids."""
    return list(text.encode("utf-8"))


def decode_ids(ids: list[int]) -> str:
    """Inverse of encode_text; control tokens are not representable."""
    for i in ids:
        if not 0 <= i < BYTE_VOCAB:
            raise ValueError(f"id {i} is not a byte token")
    return bytes(ids).decode("utf-8")


def encode_pair(prompt: str, completion: str, max_len: int) -> tuple[list[int], int]:
    """Token ids for one prompt/completion pair plus the index of the
    first scored position (the token right after SEP).

    When the pair does not fit in max_len the prompt is truncated from
    the left; the completion is always kept whole, so the sequence
    log-prob of the completion stays well defined.
    """
    if max_len < 4:
        raise ValueError("max_len must allow BOS, SEP, EOS and one completion byte")
    prompt_ids = encode_text(prompt)
    completion_ids = encode_text(completion)
    if not completion_ids:
        raise ValueError("completion must be non-empty")
    # BOS + prompt + SEP + completion + EOS
    budget = max_len - 3 - len(completion_ids)
    if budget < 0:
        raise ValueError(
            f"completion of {len(completion_ids)} bytes does not fit in max_len={max_len}"
        )
    if len(prompt_ids) > budget:
        prompt_ids = prompt_ids[len(prompt_ids) - budget :]
    ids = [BOS_ID] + prompt_ids + [SEP_ID] + completion_ids + [EOS_ID]
    completion_start = 2 + len(prompt_ids)
    return ids, completion_start
