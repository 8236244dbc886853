"""Sequence-level loss arithmetic for instruct and preference tuning.

Everything here operates on per-sequence log-probabilities emitted by a
trainer (policy and frozen reference), not on model internals, so the
numbers can be recomputed and cross-checked independently of any
training framework. Scalar math only, float64, with overflow-safe
formulations of the sigmoid and log(1 + e^x).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

LN2 = 0.6931471805599453

# Acceptance bar for analytic-vs-numeric gradient agreement.
GRAD_REL_TOL = 1e-6

SFT_TRAINER_DEFAULTS = {
    "learning_rate": 1e-6,
    "warmup_ratio": 0.1,
    "max_epochs": 5,
    "per_device_batch_size": 16,
    "gradient_accumulation_steps": 1,
}

DPO_TRAINER_DEFAULTS = {
    "beta": 0.1,
    "learning_rate": 1e-8,
    "per_device_batch_size": 16,
    "gradient_accumulation_steps": 16,
}


def sigmoid(x: float) -> float:
    """Logistic function, overflow-safe for any finite float."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def log1pexp(x: float) -> float:
    """log(1 + e^x) without overflow for large |x|."""
    if x <= 18.0:
        return math.log1p(math.exp(x))
    if x <= 33.3:
        return x + math.exp(-x)
    return x


def _validate_logprob(name: str, value: float) -> None:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ValueError(f"{name} must be a float, got {type(value).__name__}")
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    if value > 0.0:
        raise ValueError(f"{name} is a log-probability and must be <= 0, got {value!r}")


@dataclass(frozen=True)
class SftScoreRecord:
    """Per-sample target-token log-probabilities under the policy."""

    sample_id: str
    target_token_logprobs: tuple[float, ...]

    def __post_init__(self):
        if not self.sample_id:
            raise ValueError("sample_id must be non-empty")
        if not self.target_token_logprobs:
            raise ValueError("target_token_logprobs must be non-empty")
        object.__setattr__(self, "target_token_logprobs", tuple(self.target_token_logprobs))
        for i, lp in enumerate(self.target_token_logprobs):
            _validate_logprob(f"target_token_logprobs[{i}]", lp)


@dataclass(frozen=True)
class PrefScoreRecord:
    """Sequence log-probs of the preferred (w) and rejected (l)
    completions under the policy (theta) and the frozen reference."""

    sample_id: str
    logp_theta_w: float
    logp_theta_l: float
    logp_ref_w: float
    logp_ref_l: float

    def __post_init__(self):
        if not self.sample_id:
            raise ValueError("sample_id must be non-empty")
        for f in fields(self):
            if f.name == "sample_id":
                continue
            _validate_logprob(f.name, getattr(self, f.name))


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.1

    def __post_init__(self):
        if not (self.beta > 0.0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be a positive finite float, got {self.beta!r}")


@dataclass(frozen=True)
class SftBatchResult:
    n: int
    sum_loss: float
    mean_loss: float


@dataclass(frozen=True)
class DpoBatchResult:
    n: int
    beta: float
    mean_loss: float
    margins: tuple[float, ...]

    def margin_stats(self) -> dict[str, float]:
        return {
            "mean": math.fsum(self.margins) / len(self.margins),
            "min": min(self.margins),
            "max": max(self.margins),
        }


def sft_nll(record: SftScoreRecord) -> float:
    """Negative log-likelihood of one sample: minus the sum of its
    target-token log-probs. fsum keeps the sum exactly rounded, so the
    result is invariant under permutation of the tokens."""
    return -math.fsum(record.target_token_logprobs)


def sft_batch_nll(records: Sequence[SftScoreRecord]) -> SftBatchResult:
    if not records:
        raise ValueError("empty batch")
    losses = [sft_nll(r) for r in records]
    total = math.fsum(losses)
    return SftBatchResult(n=len(records), sum_loss=total, mean_loss=total / len(records))


def dpo_margin(record: PrefScoreRecord) -> float:
    """Implicit reward margin: the preferred completion's log-ratio
    against the reference minus the rejected completion's."""
    return (record.logp_theta_w - record.logp_ref_w) - (record.logp_theta_l - record.logp_ref_l)


def dpo_example_loss(record: PrefScoreRecord, config: DpoConfig = DpoConfig()) -> tuple[float, float]:
    """Return (loss, margin) for one preference example.

    loss = -log sigmoid(beta * margin), computed as log(1 + e^(-beta*m)).
    A zero margin gives exactly ln 2; the loss is finite for
    |beta * margin| up to well past 500.
    """
    margin = dpo_margin(record)
    return log1pexp(-config.beta * margin), margin


def dpo_example_grad(record: PrefScoreRecord, config: DpoConfig = DpoConfig()) -> dict[str, float]:
    """Analytic gradient of the example loss w.r.t. the four log-probs.

    d loss / d logp_theta_w = -beta * sigmoid(-beta * margin); the other
    three are the same magnitude with signs following their sign in the
    margin. Sums to zero by construction.
    """
    margin = dpo_margin(record)
    g = config.beta * sigmoid(-config.beta * margin)
    return {
        "logp_theta_w": -g,
        "logp_theta_l": g,
        "logp_ref_w": g,
        "logp_ref_l": -g,
    }


def dpo_batch_loss(records: Sequence[PrefScoreRecord], config: DpoConfig = DpoConfig()) -> DpoBatchResult:
    """Arithmetic mean of example losses plus the margins for reporting."""
    if not records:
        raise ValueError("empty batch")
    losses = []
    margins = []
    for record in records:
        loss, margin = dpo_example_loss(record, config)
        losses.append(loss)
        margins.append(margin)
    return DpoBatchResult(
        n=len(records),
        beta=config.beta,
        mean_loss=math.fsum(losses) / len(records),
        margins=tuple(margins),
    )


def finite_diff_check(
    fn: Callable[[Sequence[float]], tuple[float, Sequence[float]]],
    point: Sequence[float],
    eps: float = 1e-5,
) -> float:
    """Compare fn's analytic gradient against central differences.

    fn maps a point to (value, gradient). Returns the maximum relative
    error over coordinates, with the relative denominator floored at
    1e-12 so an exactly-zero gradient pair scores zero rather than 0/0.
    """
    _, grad = fn(point)
    grad = list(grad)
    if len(grad) != len(point):
        raise ValueError("gradient length does not match point length")
    worst = 0.0
    for i in range(len(point)):
        hi = list(point)
        lo = list(point)
        hi[i] += eps
        lo[i] -= eps
        numeric = (fn(hi)[0] - fn(lo)[0]) / (2.0 * eps)
        denom = max(abs(grad[i]), abs(numeric), 1e-12)
        worst = max(worst, abs(numeric - grad[i]) / denom)
    return worst


def dpo_point_fn(config: DpoConfig) -> Callable[[Sequence[float]], tuple[float, list[float]]]:
    """Adapter for finite_diff_check: a point is the four log-probs in
    record field order (theta_w, theta_l, ref_w, ref_l)."""

    def fn(point: Sequence[float]) -> tuple[float, list[float]]:
        # Computed straight from the coordinates: probe points sit an eps
        # off real records, so they must not pass record validation.
        theta_w, theta_l, ref_w, ref_l = point
        margin = (theta_w - ref_w) - (theta_l - ref_l)
        loss = log1pexp(-config.beta * margin)
        g = config.beta * sigmoid(-config.beta * margin)
        return loss, [-g, g, g, -g]

    return fn


def dpo_grad_check(
    records: Sequence[PrefScoreRecord], config: DpoConfig = DpoConfig(), eps: float = 1e-5
) -> float:
    """Max relative error of the analytic DPO gradient over a batch."""
    if not records:
        raise ValueError("empty batch")
    fn = dpo_point_fn(config)
    worst = 0.0
    for r in records:
        point = [r.logp_theta_w, r.logp_theta_l, r.logp_ref_w, r.logp_ref_l]
        worst = max(worst, finite_diff_check(fn, point, eps))
    return worst


# === Trainer config export ===


def export_trainer_config(use_case: str, stage: str, out_dir: str | Path) -> Path:
    """Write the frozen trainer hyperparameters for a use case and stage
    ("sft" or "dpo") as JSON. The values are the published training
    settings this package's loss arithmetic assumes."""
    if not use_case or not use_case.replace("-", "").replace("_", "").isalnum():
        raise ValueError(f"use_case must be a non-empty slug, got {use_case!r}")
    if stage == "sft":
        params = dict(SFT_TRAINER_DEFAULTS)
    elif stage == "dpo":
        params = dict(DPO_TRAINER_DEFAULTS)
    else:
        raise ValueError(f"stage must be 'sft' or 'dpo', got {stage!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{use_case}_{stage}_trainer_config.json"
    payload = {"use_case": use_case, "stage": stage, **params}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# === Score record JSONL ===


def write_pref_score_records(records: Sequence[PrefScoreRecord], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "sample_id": r.sample_id,
                        "logp_theta_w": r.logp_theta_w,
                        "logp_theta_l": r.logp_theta_l,
                        "logp_ref_w": r.logp_ref_w,
                        "logp_ref_l": r.logp_ref_l,
                    }
                )
                + "\n"
            )
    return path


def read_pref_score_records(path: str | Path) -> list[PrefScoreRecord]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                records.append(
                    PrefScoreRecord(
                        sample_id=raw["sample_id"],
                        logp_theta_w=float(raw["logp_theta_w"]),
                        logp_theta_l=float(raw["logp_theta_l"]),
                        logp_ref_w=float(raw["logp_ref_w"]),
                        logp_ref_l=float(raw["logp_ref_l"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"bad preference score record at {path}:{lineno}: {exc}") from None
    return records


def write_sft_score_records(records: Sequence[SftScoreRecord], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {"sample_id": r.sample_id, "target_token_logprobs": list(r.target_token_logprobs)}
                )
                + "\n"
            )
    return path


def read_sft_score_records(path: str | Path) -> list[SftScoreRecord]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                records.append(
                    SftScoreRecord(
                        sample_id=raw["sample_id"],
                        target_token_logprobs=tuple(float(x) for x in raw["target_token_logprobs"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"bad instruct score record at {path}:{lineno}: {exc}") from None
    return records
