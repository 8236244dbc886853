"""Pairwise win rates from a judge model, with position-bias control.

Every method pair is judged on every prompt in both presentation
orders, so a judge that always favors the first slot washes out to 0.5.
Verdicts parse from the final "[[A]]"/"[[B]]" marker; an unparseable
reply is retried once (under a distinct cache key) and then excluded
from the denominator. Confidence intervals come from a seeded
percentile bootstrap over per-prompt outcomes.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass, field
from typing import Sequence

from .prompts import DEFAULT_JUDGE_RUBRIC, JUDGE_PAIRWISE, RenderContext, render
from .teacher import ChatMessage, DecodeParams, TeacherClient

logger = logging.getLogger(__name__)

_VERDICT = re.compile(r"\[\[(A|B)\]\]")

RETRY_SALT = "judge-retry-1"


class JudgeError(Exception):
    pass


@dataclass(frozen=True)
class JudgeVerdict:
    prompt_id: str
    slot_a_method: str
    slot_b_method: str
    winner: str | None  # winning method name; None = parse failure
    raw: str


@dataclass(frozen=True)
class WinRateCell:
    method_a: str
    method_b: str
    wins_a: int
    n: int
    rate: float | None
    ci_halfwidth: float | None
    parse_failures: int


@dataclass
class WinRateTable:
    methods: list[str]
    cells: dict[tuple[str, str], WinRateCell]
    verdicts: list[JudgeVerdict] = field(default_factory=list)

    def rate(self, method_a: str, method_b: str) -> float | None:
        return self.cells[(method_a, method_b)].rate

    def as_dict(self) -> dict:
        return {
            "methods": self.methods,
            "cells": [
                {
                    "method_a": c.method_a,
                    "method_b": c.method_b,
                    "wins_a": c.wins_a,
                    "n": c.n,
                    "rate": c.rate,
                    "ci_halfwidth": c.ci_halfwidth,
                    "parse_failures": c.parse_failures,
                }
                for _, c in sorted(self.cells.items())
            ],
        }

    def to_csv(self) -> str:
        """Rate matrix, row method versus column method."""
        lines = ["method," + ",".join(self.methods)]
        for a in self.methods:
            row = [a]
            for b in self.methods:
                if a == b:
                    row.append("")
                else:
                    rate = self.cells[(a, b)].rate
                    row.append("" if rate is None else f"{rate:.4f}")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def parse_verdict(text: str) -> str | None:
    """Slot verdict from the last [[A]]/[[B]] marker, None when absent."""
    matches = _VERDICT.findall(text)
    return matches[-1] if matches else None


def judge_pair(
    client: TeacherClient,
    question: str,
    response_a: str,
    response_b: str,
    rubric: str = DEFAULT_JUDGE_RUBRIC,
    decode: DecodeParams | None = None,
    template_dir: str | None = None,
) -> tuple[str | None, str]:
    """One judgment as presented: returns (slot winner or None, raw
    reply). Retries an unparseable reply once before giving up."""
    prompt = render(
        JUDGE_PAIRWISE,
        RenderContext(
            question=question, response_a=response_a, response_b=response_b, rubric=rubric
        ),
        template_dir,
    )
    messages = [ChatMessage("user", prompt)]
    params = decode or DecodeParams.greedy(max_tokens=256)
    raw = client.chat_complete(messages, params)
    verdict = parse_verdict(raw)
    if verdict is None:
        logger.warning("unparseable judge reply, retrying once: %r", raw[:80])
        raw = client.chat_complete(messages, params, cache_salt=RETRY_SALT)
        verdict = parse_verdict(raw)
        if verdict is None:
            logger.warning("judge reply unparseable after retry: %r", raw[:80])
    return verdict, raw


def bootstrap_ci(
    outcomes: Sequence[float], level: float = 0.95, resamples: int = 1000, seed: int = 13
) -> float:
    """Percentile-bootstrap halfwidth of the mean outcome. Deterministic
    given the seed; identical outcomes give exactly zero."""
    n = len(outcomes)
    if n < 2:
        raise ValueError("bootstrap needs at least 2 outcomes")
    if not (0.0 < level < 1.0):
        raise ValueError("level must lie in (0, 1)")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    rng = random.Random(seed)
    outcomes = list(outcomes)
    means = sorted(
        sum(outcomes[rng.randrange(n)] for _ in range(n)) / n for _ in range(resamples)
    )
    alpha = (1.0 - level) / 2.0
    return (_percentile(means, 1.0 - alpha) - _percentile(means, alpha)) / 2.0


def _percentile(sorted_values: list[float], q: float) -> float:
    pos = q * (len(sorted_values) - 1)
    lo = int(pos)
    if lo + 1 >= len(sorted_values):
        return sorted_values[-1]
    frac = pos - lo
    return sorted_values[lo] + (sorted_values[lo + 1] - sorted_values[lo]) * frac


def winrate_matrix(
    client: TeacherClient,
    prompts: dict[str, str],
    responses_by_method: dict[str, dict[str, str]],
    rubric: str = DEFAULT_JUDGE_RUBRIC,
    decode: DecodeParams | None = None,
    resamples: int = 1000,
    ci_level: float = 0.95,
    bootstrap_seed: int = 13,
    template_dir: str | None = None,
) -> WinRateTable:
    """Judge every ordered method pair on every prompt in both
    presentation orders and aggregate win rates.

    Each method must provide a response for every prompt id. The table
    is a pure function of the collected verdicts: mirrored cells use the
    same judgments, so rate(A, B) + rate(B, A) = 1 whenever every reply
    parsed.
    """
    methods = sorted(responses_by_method)
    if len(methods) < 2:
        raise JudgeError("need at least two methods to compare")
    if not prompts:
        raise JudgeError("need at least one prompt")
    prompt_ids = sorted(prompts)
    for method in methods:
        missing = [pid for pid in prompt_ids if pid not in responses_by_method[method]]
        if missing:
            raise JudgeError(f"method {method!r} is missing responses for {missing}")

    verdicts: list[JudgeVerdict] = []
    for i, method_a in enumerate(methods):
        for method_b in methods[i + 1 :]:
            for pid in prompt_ids:
                for slot_a, slot_b in ((method_a, method_b), (method_b, method_a)):
                    slot_winner, raw = judge_pair(
                        client,
                        prompts[pid],
                        responses_by_method[slot_a][pid],
                        responses_by_method[slot_b][pid],
                        rubric,
                        decode,
                        template_dir,
                    )
                    if slot_winner == "A":
                        winner = slot_a
                    elif slot_winner == "B":
                        winner = slot_b
                    else:
                        winner = None
                    verdicts.append(
                        JudgeVerdict(
                            prompt_id=pid,
                            slot_a_method=slot_a,
                            slot_b_method=slot_b,
                            winner=winner,
                            raw=raw,
                        )
                    )

    cells: dict[tuple[str, str], WinRateCell] = {}
    for i, method_a in enumerate(methods):
        for method_b in methods[i + 1 :]:
            pair_verdicts = [
                v for v in verdicts if {v.slot_a_method, v.slot_b_method} == {method_a, method_b}
            ]
            cells[(method_a, method_b)] = _aggregate(
                method_a, method_b, pair_verdicts, prompt_ids, ci_level, resamples, bootstrap_seed
            )
            cells[(method_b, method_a)] = _aggregate(
                method_b, method_a, pair_verdicts, prompt_ids, ci_level, resamples, bootstrap_seed
            )
    return WinRateTable(methods=methods, cells=cells, verdicts=verdicts)


def _aggregate(
    method_a: str,
    method_b: str,
    pair_verdicts: list[JudgeVerdict],
    prompt_ids: list[str],
    ci_level: float,
    resamples: int,
    bootstrap_seed: int,
) -> WinRateCell:
    judged = [v for v in pair_verdicts if v.winner is not None]
    parse_failures = len(pair_verdicts) - len(judged)
    wins_a = sum(1 for v in judged if v.winner == method_a)
    n = len(judged)
    rate = wins_a / n if n else None
    outcomes = []
    for pid in prompt_ids:
        votes = [1.0 if v.winner == method_a else 0.0 for v in judged if v.prompt_id == pid]
        if votes:
            outcomes.append(sum(votes) / len(votes))
    ci: float | None
    try:
        ci = bootstrap_ci(outcomes, ci_level, resamples, bootstrap_seed)
    except ValueError:
        logger.warning(
            "too few judged prompts for a bootstrap interval on (%s, %s)", method_a, method_b
        )
        ci = None
    return WinRateCell(
        method_a=method_a,
        method_b=method_b,
        wins_a=wins_a,
        n=n,
        rate=rate,
        ci_halfwidth=ci,
        parse_failures=parse_failures,
    )
