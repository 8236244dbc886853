"""Prompt templates and rendering.

The generation templates (question, answer, preference) reproduce an
established grounded-generation phrasing verbatim and must not be edited
casually: downstream parsing and the template tests pin their exact
text. The filter and judge templates are stand-ins written for this
package. Templates live as text assets under ``templates/`` and can be
overridden per run by pointing ``template_dir`` at a directory holding
files with the same names.

Placeholders use single-brace markers ({nex}, {passage}, {keyword},
{question}, {response_a}, {response_b}, {rubric}) and are substituted in
a single pass, so braces inside the templates' JSONL examples and inside
substituted values are left alone.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

QUESTION_GEN = "question_gen"
ANSWER_GEN = "answer_gen"
PREFERENCE_GEN = "preference_gen"
VALUE_FILTER = "value_filter"
JUDGE_PAIRWISE = "judge_pairwise"

TEMPLATE_IDS = (QUESTION_GEN, ANSWER_GEN, PREFERENCE_GEN, VALUE_FILTER, JUDGE_PAIRWISE)

DEFAULT_JUDGE_RUBRIC = (
    "Faithfulness and relevance: which response better adheres to the values "
    "expressed in the grounding material and more directly and completely "
    "answers the query?"
)

_MARKER = re.compile(r"\{(nex|passage|keyword|question|response_a|response_b|rubric)\}")


class PromptError(Exception):
    """Raised for unknown templates or missing placeholder values."""


@dataclass
class RenderContext:
    """Values available for placeholder substitution. Fields not used by
    a template may stay unset."""

    nex: int | None = None
    passage: str | None = None
    keyword: str | None = None
    question: str | None = None
    response_a: str | None = None
    response_b: str | None = None
    rubric: str | None = None


_cache: dict[tuple[str | None, str], str] = {}


def load_template(template_id: str, template_dir: str | Path | None = None) -> str:
    """Return the canonical template text for an id.

    With ``template_dir`` set, ``<template_dir>/<template_id>.txt`` takes
    precedence over the packaged asset.
    """
    if template_id not in TEMPLATE_IDS:
        raise PromptError(f"unknown template: {template_id!r}")
    key = (str(template_dir) if template_dir else None, template_id)
    if key in _cache:
        return _cache[key]
    if template_dir is not None:
        override = Path(template_dir) / f"{template_id}.txt"
        if override.exists():
            text = override.read_text(encoding="utf-8")
            _cache[key] = text
            return text
    text = (resources.files("docalign") / "templates" / f"{template_id}.txt").read_text(
        encoding="utf-8"
    )
    _cache[key] = text
    return text


def placeholders(template_text: str) -> set[str]:
    """Placeholder names a template text requires."""
    return set(_MARKER.findall(template_text))


def render(template_id: str, ctx: RenderContext, template_dir: str | Path | None = None) -> str:
    """Render a template with the context's values.

    Every placeholder present in the template must have a non-empty value
    in the context; PromptError lists any that are missing. Substitution
    is single-pass: braces inside substituted values are not re-expanded.
    """
    template = load_template(template_id, template_dir)
    required = placeholders(template)
    missing = []
    values = {}
    for name in sorted(required):
        value = getattr(ctx, name)
        if value is None or (isinstance(value, str) and not value.strip()):
            missing.append(name)
        else:
            values[name] = str(value)
    if missing:
        raise PromptError(f"missing placeholder values for {template_id}: {', '.join(missing)}")
    return _MARKER.sub(lambda m: values[m.group(1)], template)
