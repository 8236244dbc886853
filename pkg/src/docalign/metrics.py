"""Corpus BLEU, ROUGE F1 variants, and greedy token-embedding F1.

BLEU follows the reference scorer's corpus conventions: mteval-13a
tokenization, 4-gram clipped precisions, brevity penalty, and
exponential smoothing (each zero numerator halves a running smoothing
weight) so near-misses do not zero the geometric mean. ROUGE uses
lowercase alphanumeric tokens without stemming; the summary variant
splits sentences on newlines, then on terminal punctuation.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

Embedder = Callable[[Sequence[str]], list[list[float]]]

MAX_NGRAM_ORDER = 4

_ROUGE_TOKEN = re.compile(r"[a-z0-9]+")
_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")

# mteval-13a tokenization: space out punctuation, then period/comma when
# not flanked by digits, then dash after a digit.
_13A_RULES = (
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
)


def tokenize_13a(line: str) -> list[str]:
    line = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = (
            line.replace("&quot;", '"')
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">")
        )
    line = f" {line} "
    for pattern, repl in _13A_RULES:
        line = pattern.sub(repl, line)
    return line.split()


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Corpus-level 4-gram BLEU in [0, 100], one reference per
    hypothesis."""
    if not hypotheses:
        raise ValueError("empty corpus")
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references must align")
    correct = [0] * MAX_NGRAM_ORDER
    total = [0] * MAX_NGRAM_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_tokens = tokenize_13a(hyp)
        ref_tokens = tokenize_13a(ref)
        hyp_len += len(hyp_tokens)
        ref_len += len(ref_tokens)
        for n in range(1, MAX_NGRAM_ORDER + 1):
            hyp_counts = _ngrams(hyp_tokens, n)
            if not hyp_counts:
                continue
            ref_counts = _ngrams(ref_tokens, n)
            total[n - 1] += sum(hyp_counts.values())
            correct[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    if hyp_len == 0:
        return 0.0
    # Precisions as fractions; the exponential of their mean log stays
    # exactly 1.0 for a perfect match, so the score cannot exceed 100.
    precisions = [0.0] * MAX_NGRAM_ORDER
    smooth = 1.0
    for n in range(1, MAX_NGRAM_ORDER + 1):
        if total[n - 1] == 0:
            break
        if correct[n - 1] == 0:
            smooth *= 2.0
            precisions[n - 1] = 1.0 / (smooth * total[n - 1])
        else:
            precisions[n - 1] = correct[n - 1] / total[n - 1]
    if any(p <= 0.0 for p in precisions):
        return 0.0
    if hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    return 100.0 * bp * math.exp(math.fsum(math.log(p) for p in precisions) / MAX_NGRAM_ORDER)


def rouge_tokenize(text: str) -> list[str]:
    return _ROUGE_TOKEN.findall(text.lower())


def split_sentences(text: str) -> list[str]:
    sentences = []
    for line in text.split("\n"):
        for piece in _SENTENCE_SPLIT.split(line):
            if piece.strip():
                sentences.append(piece.strip())
    return sentences


def _fscore(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _rouge_n(hyp: list[str], ref: list[str], n: int) -> float:
    hyp_counts = _ngrams(hyp, n)
    ref_counts = _ngrams(ref, n)
    if not hyp_counts or not ref_counts:
        return 0.0
    overlap = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    return _fscore(overlap / sum(hyp_counts.values()), overlap / sum(ref_counts.values()))


def _lcs_table(a: list[str], b: list[str]) -> list[list[int]]:
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    return _lcs_table(a, b)[len(a)][len(b)]


def _lcs_ref_indices(ref: list[str], hyp: list[str]) -> set[int]:
    """Positions in ref matched by one LCS against hyp."""
    if not ref or not hyp:
        return set()
    table = _lcs_table(ref, hyp)
    matched = set()
    i, j = len(ref), len(hyp)
    while i > 0 and j > 0:
        if ref[i - 1] == hyp[j - 1]:
            matched.add(i - 1)
            i -= 1
            j -= 1
        elif table[i - 1][j] >= table[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return matched


def _rouge_l(hyp: list[str], ref: list[str]) -> float:
    if not hyp or not ref:
        return 0.0
    lcs = _lcs_length(hyp, ref)
    return _fscore(lcs / len(hyp), lcs / len(ref))


def _rouge_lsum(hypothesis: str, reference: str) -> float:
    hyp_sentences = [rouge_tokenize(s) for s in split_sentences(hypothesis)]
    ref_sentences = [rouge_tokenize(s) for s in split_sentences(reference)]
    hyp_total = sum(len(s) for s in hyp_sentences)
    ref_total = sum(len(s) for s in ref_sentences)
    if hyp_total == 0 or ref_total == 0:
        return 0.0
    hits = 0
    for ref_sent in ref_sentences:
        union: set[int] = set()
        for hyp_sent in hyp_sentences:
            union |= _lcs_ref_indices(ref_sent, hyp_sent)
        hits += len(union)
    return _fscore(hits / hyp_total, hits / ref_total)


def rouge_scores(hypothesis: str, reference: str) -> dict[str, float]:
    """F1 for unigram and bigram overlap, whole-text LCS, and
    sentence-level union LCS."""
    hyp = rouge_tokenize(hypothesis)
    ref = rouge_tokenize(reference)
    return {
        "rouge1": _rouge_n(hyp, ref, 1),
        "rouge2": _rouge_n(hyp, ref, 2),
        "rougeL": _rouge_l(hyp, ref),
        "rougeLsum": _rouge_lsum(hypothesis, reference),
    }


def corpus_rouge(hypotheses: Sequence[str], references: Sequence[str]) -> dict[str, float]:
    """Mean of per-pair scores."""
    if not hypotheses or len(hypotheses) != len(references):
        raise ValueError("hypotheses and references must align and be non-empty")
    keys = ("rouge1", "rouge2", "rougeL", "rougeLsum")
    sums = dict.fromkeys(keys, 0.0)
    for hyp, ref in zip(hypotheses, references):
        scores = rouge_scores(hyp, ref)
        for key in keys:
            sums[key] += scores[key]
    return {key: sums[key] / len(hypotheses) for key in keys}


def _cosine(u: list[float], v: list[float]) -> float:
    if u is v:
        return 1.0
    nu = math.sqrt(math.fsum(x * x for x in u))
    nv = math.sqrt(math.fsum(x * x for x in v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return math.fsum(a * b for a, b in zip(u, v)) / (nu * nv)


def _greedy_f1(hyp_tokens: list[str], ref_tokens: list[str], vectors: dict[str, list[float]]) -> float:
    if not hyp_tokens or not ref_tokens:
        return 0.0
    precision = math.fsum(
        max(_cosine(vectors[h], vectors[r]) for r in ref_tokens) for h in hyp_tokens
    ) / len(hyp_tokens)
    recall = math.fsum(
        max(_cosine(vectors[r], vectors[h]) for h in hyp_tokens) for r in ref_tokens
    ) / len(ref_tokens)
    # similarities can be negative for arbitrary embedders; the score is
    # pinned to [0, 1]
    return _fscore(max(precision, 0.0), max(recall, 0.0))


def embed_f1(hypothesis: str, reference: str, embedder: Embedder) -> float:
    """Greedy-match token embedding F1. Identical token sequences score
    exactly 1 for any embedder because each token maps to one shared
    vector."""
    hyp_tokens = rouge_tokenize(hypothesis)
    ref_tokens = rouge_tokenize(reference)
    vocab = sorted(set(hyp_tokens) | set(ref_tokens))
    if not vocab:
        return 0.0
    vectors = dict(zip(vocab, embedder(vocab)))
    return _greedy_f1(hyp_tokens, ref_tokens, vectors)


@dataclass(frozen=True)
class MetricReport:
    n: int
    bleu: float
    rouge1: float
    rouge2: float
    rougeL: float
    rougeLsum: float
    embed_f1: float | None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("report needs at least one pair")
        if not (0.0 <= self.bleu <= 100.0):
            raise ValueError(f"bleu out of range: {self.bleu}")
        for name in ("rouge1", "rouge2", "rougeL", "rougeLsum"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} out of range: {value}")
        if self.embed_f1 is not None and not (0.0 <= self.embed_f1 <= 1.0):
            raise ValueError(f"embed_f1 out of range: {self.embed_f1}")

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "bleu": self.bleu,
            "rouge1": self.rouge1,
            "rouge2": self.rouge2,
            "rougeL": self.rougeL,
            "rougeLsum": self.rougeLsum,
            "embed_f1": self.embed_f1,
        }


def compute_metric_report(
    hypotheses: Sequence[str], references: Sequence[str], embedder: Embedder | None = None
) -> MetricReport:
    """All metrics over an aligned corpus. The embedding metric embeds
    the union vocabulary in one call; when no embedder is given (or it
    fails upstream) embed_f1 is omitted as None."""
    if not hypotheses or len(hypotheses) != len(references):
        raise ValueError("hypotheses and references must align and be non-empty")
    rouge = corpus_rouge(hypotheses, references)
    embedding_mean: float | None = None
    if embedder is not None:
        token_lists = [
            (rouge_tokenize(h), rouge_tokenize(r)) for h, r in zip(hypotheses, references)
        ]
        vocab = sorted({t for hyp, ref in token_lists for t in hyp + ref})
        if vocab:
            vectors = dict(zip(vocab, embedder(vocab)))
            embedding_mean = math.fsum(
                _greedy_f1(hyp, ref, vectors) for hyp, ref in token_lists
            ) / len(token_lists)
        else:
            embedding_mean = 0.0
    return MetricReport(
        n=len(hypotheses),
        bleu=corpus_bleu(hypotheses, references),
        rouge1=rouge["rouge1"],
        rouge2=rouge["rouge2"],
        rougeL=rouge["rougeL"],
        rougeLsum=rouge["rougeLsum"],
        embed_f1=embedding_mean,
    )
