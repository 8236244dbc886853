"""Training and scoring jobs.

A job reads one exported dataset and one exported trainer-config file,
runs entirely in-process on the chosen device, and leaves three kinds
of artifact in its output directory: a checkpoint, a JSONL training log
with one record per optimizer step, and a JSON summary. The scoring
job instead emits per-sample score records (sequence log-probs of the
chosen and rejected completions under the policy and the reference) in
the schema the exporting tool's loss verifier reads back, so every loss
this package reports can be re-derived outside it.
"""

from __future__ import annotations

import copy
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from torch.nn import functional as F

from trainer_bridge.data import (
    ChatExample,
    PairExample,
    encode_batch,
    load_chat_dataset,
    load_pair_dataset,
)
from trainer_bridge.errors import BridgeConfigError, BridgeDataError
from trainer_bridge.model import (
    ByteDecoder,
    ModelSpec,
    resolve_model_spec,
    sequence_logprobs,
    spec_as_dict,
    token_nll,
    warmup_lr,
)
from trainer_bridge.vocab import VOCAB_SIZE

logger = logging.getLogger(__name__)

STAGES = ("sft", "dpo", "score")

# keys each exported trainer config must carry, by stage
_SFT_CONFIG_KEYS = {
    "use_case",
    "stage",
    "learning_rate",
    "warmup_ratio",
    "max_epochs",
    "per_device_batch_size",
    "gradient_accumulation_steps",
}
_DPO_CONFIG_KEYS = {
    "use_case",
    "stage",
    "beta",
    "learning_rate",
    "per_device_batch_size",
    "gradient_accumulation_steps",
}

DEFAULT_DPO_STEPS = 50


@dataclass
class BridgeJob:
    """One unit of work: fine-tune, preference-train, or score.

    The optional knobs override the exported trainer config; they exist
    because that config targets full-scale models, while this package
    runs desk-scale stand-ins that need desk-scale step sizes.
    """

    stage: str
    dataset: Path
    config: Path | None
    model_id: str
    out_dir: Path
    reference: Path | None = None  # sft checkpoint; required for dpo and score
    policy: Path | None = None  # scored checkpoint; required for score
    eval_dataset: Path | None = None  # held-out pairs for dpo margin tracking
    seed: int = 11
    device: str = "cpu"
    learning_rate: float | None = None
    batch_size: int | None = None
    grad_accum: int | None = None
    beta: float | None = None
    max_epochs: int | None = None
    max_steps: int | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise BridgeConfigError(f"unknown stage {self.stage!r} (expected one of {STAGES})")
        self.dataset = Path(self.dataset)
        self.out_dir = Path(self.out_dir)
        if self.config is not None:
            self.config = Path(self.config)
        if self.reference is not None:
            self.reference = Path(self.reference)
        if self.policy is not None:
            self.policy = Path(self.policy)
        if self.eval_dataset is not None:
            self.eval_dataset = Path(self.eval_dataset)
        if self.stage in ("dpo", "score") and self.reference is None:
            raise BridgeConfigError(f"stage {self.stage!r} requires a reference checkpoint")
        if self.stage == "score" and self.policy is None:
            raise BridgeConfigError("stage 'score' requires a policy checkpoint")
        if self.stage in ("sft", "dpo") and self.config is None:
            raise BridgeConfigError(f"stage {self.stage!r} requires a trainer config file")
        resolve_model_spec(self.model_id)
        if self.device == "cuda" and not torch.cuda.is_available():
            raise BridgeConfigError("device 'cuda' requested but no CUDA device is available")
        if self.device not in ("cpu", "cuda"):
            raise BridgeConfigError(f"unknown device {self.device!r}")


def read_trainer_config(path: str | Path, stage: str) -> dict:
    """Load and validate an exported trainer-config JSON for a stage."""
    path = Path(path)
    if not path.is_file():
        raise BridgeConfigError(f"trainer config not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BridgeConfigError(f"trainer config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise BridgeConfigError(f"trainer config {path} must be a JSON object")
    expected = _SFT_CONFIG_KEYS if stage == "sft" else _DPO_CONFIG_KEYS
    if "stage" in raw and raw["stage"] != stage:
        raise BridgeConfigError(
            f"trainer config {path} is for stage {raw['stage']!r}, job wants {stage!r}"
        )
    missing = expected - raw.keys()
    if missing:
        raise BridgeConfigError(f"trainer config {path} is missing keys: {sorted(missing)}")
    for key in expected - {"use_case", "stage"}:
        value = raw[key]
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise BridgeConfigError(f"trainer config {path}: {key} must be a number")
        floor_ok = value >= 0 if key == "warmup_ratio" else value > 0
        if not floor_ok:
            raise BridgeConfigError(f"trainer config {path}: {key} must be positive")
    return raw


# === checkpoints ===


def save_checkpoint(path: str | Path, model: ByteDecoder, model_id: str, stage: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "model_id": model_id,
            "stage": stage,
            "vocab_size": VOCAB_SIZE,
            "spec": spec_as_dict(model.spec),
            "state_dict": model.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path, device: str = "cpu") -> tuple[ByteDecoder, dict]:
    path = Path(path)
    if not path.is_file():
        raise BridgeConfigError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location=device, weights_only=True)
    for key in ("model_id", "vocab_size", "spec", "state_dict"):
        if key not in payload:
            raise BridgeConfigError(f"checkpoint {path} is missing {key!r}")
    if payload["vocab_size"] != VOCAB_SIZE:
        raise BridgeConfigError(
            f"tokenization mismatch: checkpoint {path} has vocab {payload['vocab_size']}, "
            f"this package uses {VOCAB_SIZE}"
        )
    model = ByteDecoder(ModelSpec(**payload["spec"]))
    model.load_state_dict(payload["state_dict"])
    model.to(device)
    return model, payload


# === shared loop helpers ===


def _batches(n: int, batch_size: int, rng: random.Random) -> list[list[int]]:
    order = list(range(n))
    rng.shuffle(order)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class _StepLog:
    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        self._fh = path.open("w", encoding="utf-8")

    def write(self, **record) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _pair_logprobs(
    model: torch.nn.Module,
    pairs: Sequence[PairExample],
    idxs: Sequence[int],
    max_len: int,
    device: str,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sequence log-probs of (chosen, rejected) for the given rows."""
    chosen = encode_batch([(pairs[i].prompt, pairs[i].chosen) for i in idxs], max_len)
    rejected = encode_batch([(pairs[i].prompt, pairs[i].rejected) for i in idxs], max_len)
    lp_w = sequence_logprobs(model, chosen.ids.to(device), chosen.score_mask.to(device))
    lp_l = sequence_logprobs(model, rejected.ids.to(device), rejected.score_mask.to(device))
    return lp_w, lp_l


def _dpo_batch(
    policy: torch.nn.Module,
    reference: torch.nn.Module,
    pairs: Sequence[PairExample],
    idxs: Sequence[int],
    beta: float,
    max_len: int,
    device: str,
) -> tuple[torch.Tensor, torch.Tensor]:
    """DPO loss and margins for one microbatch; differentiable through
    the policy only."""
    lp_tw, lp_tl = _pair_logprobs(policy, pairs, idxs, max_len, device)
    with torch.no_grad():
        lp_rw, lp_rl = _pair_logprobs(reference, pairs, idxs, max_len, device)
    margins = (lp_tw - lp_rw) - (lp_tl - lp_rl)
    loss = F.softplus(-beta * margins).mean()
    return loss, margins.detach()


def _mean_dpo_stats(
    policy: torch.nn.Module,
    reference: torch.nn.Module,
    pairs: Sequence[PairExample],
    beta: float,
    batch_size: int,
    max_len: int,
    device: str,
) -> tuple[float, float]:
    """Mean DPO loss and mean margin over a whole dataset."""
    losses = []
    margins = []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            idxs = range(start, min(start + batch_size, len(pairs)))
            lp_tw, lp_tl = _pair_logprobs(policy, pairs, list(idxs), max_len, device)
            lp_rw, lp_rl = _pair_logprobs(reference, pairs, list(idxs), max_len, device)
            m = (lp_tw - lp_rw) - (lp_tl - lp_rl)
            losses.append(F.softplus(-beta * m).double())
            margins.append(m.double())
    all_losses = torch.cat(losses)
    all_margins = torch.cat(margins)
    return all_losses.mean().item(), all_margins.mean().item()


# === jobs ===


def train_sft(job: BridgeJob) -> dict:
    """Supervised fine-tuning over a chat dataset. Returns a summary
    dict; writes checkpoint.pt, train_log.jsonl, and summary.json."""
    if job.stage != "sft":
        raise BridgeConfigError(f"train_sft got a {job.stage!r} job")
    config = read_trainer_config(job.config, "sft")
    lr = job.learning_rate if job.learning_rate is not None else float(config["learning_rate"])
    batch_size = job.batch_size if job.batch_size is not None else int(config["per_device_batch_size"])
    grad_accum = job.grad_accum if job.grad_accum is not None else int(config["gradient_accumulation_steps"])
    max_epochs = job.max_epochs if job.max_epochs is not None else int(config["max_epochs"])
    warmup_ratio = float(config["warmup_ratio"])

    examples = load_chat_dataset(job.dataset)
    if not examples:
        raise BridgeDataError(f"sft dataset {job.dataset} is empty")
    spec = resolve_model_spec(job.model_id)
    torch.manual_seed(job.seed)
    model = ByteDecoder(spec).to(job.device)
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr)
    rng = random.Random(job.seed)

    # one epoch = one shuffled pass over the microbatches; accumulation
    # windows may span epoch boundaries
    micro_per_epoch = -(-len(examples) // batch_size)
    total_steps = max(1, (micro_per_epoch * max_epochs) // grad_accum)
    if job.max_steps is not None:
        total_steps = min(total_steps, job.max_steps)

    log = _StepLog(job.out_dir / "train_log.jsonl")
    step = 0
    consumed = 0
    batches: list[list[int]] = []
    try:
        while step < total_steps:
            step += 1
            for group in optimizer.param_groups:
                group["lr"] = warmup_lr(step, total_steps, lr, warmup_ratio)
            optimizer.zero_grad()
            micro_losses = []
            for _ in range(grad_accum):
                if not batches:
                    batches = _batches(len(examples), batch_size, rng)
                idxs = batches.pop(0)
                consumed += 1
                batch = encode_batch(
                    [(examples[i].prompt, examples[i].completion) for i in idxs],
                    spec.max_seq_len,
                )
                loss = token_nll(model, batch.ids.to(job.device), batch.score_mask.to(job.device))
                (loss / grad_accum).backward()
                micro_losses.append(loss.item())
            optimizer.step()
            log.write(
                step=step,
                epoch=(consumed - 1) // micro_per_epoch,
                loss=sum(micro_losses) / len(micro_losses),
                lr=optimizer.param_groups[0]["lr"],
            )
    finally:
        log.close()

    model.eval()
    checkpoint = save_checkpoint(job.out_dir / "checkpoint.pt", model, job.model_id, "sft")
    summary = {
        "stage": "sft",
        "model_id": job.model_id,
        "parameters": model.parameter_count(),
        "examples": len(examples),
        "steps": step,
        "checkpoint": str(checkpoint),
        "train_log": str(log.path),
    }
    (job.out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info("sft: %d steps over %d examples -> %s", step, len(examples), checkpoint)
    return summary


def train_dpo(job: BridgeJob) -> dict:
    """Preference optimization against a frozen reference. The policy
    starts as a copy of the reference checkpoint, so the first logged
    record (step 0, before any update) measures the loss at zero margin."""
    if job.stage != "dpo":
        raise BridgeConfigError(f"train_dpo got a {job.stage!r} job")
    config = read_trainer_config(job.config, "dpo")
    lr = job.learning_rate if job.learning_rate is not None else float(config["learning_rate"])
    batch_size = job.batch_size if job.batch_size is not None else int(config["per_device_batch_size"])
    grad_accum = job.grad_accum if job.grad_accum is not None else int(config["gradient_accumulation_steps"])
    beta = job.beta if job.beta is not None else float(config["beta"])
    max_steps = job.max_steps if job.max_steps is not None else DEFAULT_DPO_STEPS

    pairs = load_pair_dataset(job.dataset)
    if not pairs:
        raise BridgeDataError(f"preference dataset {job.dataset} is empty")
    held_out = load_pair_dataset(job.eval_dataset) if job.eval_dataset else []

    reference, payload = load_checkpoint(job.reference, job.device)
    reference.eval()
    for param in reference.parameters():
        param.requires_grad_(False)
    policy = copy.deepcopy(reference)
    for param in policy.parameters():
        param.requires_grad_(True)
    policy.train()
    max_len = policy.spec.max_seq_len

    torch.manual_seed(job.seed)
    rng = random.Random(job.seed)
    optimizer = torch.optim.AdamW(policy.parameters(), lr=lr)

    log = _StepLog(job.out_dir / "train_log.jsonl")
    policy.eval()
    step0_loss, step0_margin = _mean_dpo_stats(
        policy, reference, pairs, beta, batch_size, max_len, job.device
    )
    log.write(step=0, loss=step0_loss, margin_mean=step0_margin)
    held_out_initial = None
    if held_out:
        _, held_out_initial = _mean_dpo_stats(
            policy, reference, held_out, beta, batch_size, max_len, job.device
        )
    policy.train()

    step = 0
    batches: list[list[int]] = []
    last_loss = step0_loss
    try:
        while step < max_steps:
            step += 1
            optimizer.zero_grad()
            micro_losses = []
            micro_margins = []
            for _ in range(grad_accum):
                if not batches:
                    batches = _batches(len(pairs), batch_size, rng)
                idxs = batches.pop(0)
                loss, margins = _dpo_batch(
                    policy, reference, pairs, idxs, beta, max_len, job.device
                )
                (loss / grad_accum).backward()
                micro_losses.append(loss.item())
                micro_margins.append(margins.mean().item())
            optimizer.step()
            last_loss = sum(micro_losses) / len(micro_losses)
            log.write(
                step=step,
                loss=last_loss,
                margin_mean=sum(micro_margins) / len(micro_margins),
            )
    finally:
        log.close()

    policy.eval()
    held_out_final = None
    if held_out:
        _, held_out_final = _mean_dpo_stats(
            policy, reference, held_out, beta, batch_size, max_len, job.device
        )
    checkpoint = save_checkpoint(job.out_dir / "checkpoint.pt", policy, job.model_id, "dpo")
    summary = {
        "stage": "dpo",
        "model_id": job.model_id,
        "beta": beta,
        "examples": len(pairs),
        "steps": step,
        "step0_loss": step0_loss,
        "step0_margin": step0_margin,
        "final_step_loss": last_loss,
        "held_out_examples": len(held_out),
        "held_out_margin_initial": held_out_initial,
        "held_out_margin_final": held_out_final,
        "checkpoint": str(checkpoint),
        "train_log": str(log.path),
        "reference": str(job.reference),
    }
    (job.out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    logger.info(
        "dpo: %d steps, step0 loss %.6f, final loss %.6f", step, step0_loss, last_loss
    )
    return summary


def score_logprobs(
    policy_path: str | Path,
    reference_path: str | Path,
    dataset_path: str | Path,
    out_path: str | Path,
    beta: float = 0.1,
    batch_size: int = 16,
    device: str = "cpu",
) -> dict:
    """Write one score record per preference pair: sequence log-probs
    of the chosen and rejected completions under the policy and the
    reference. Also reports this package's own mean DPO loss over those
    records so an external reader re-deriving the loss from the file
    has a number to agree with."""
    policy, policy_payload = load_checkpoint(policy_path, device)
    reference, ref_payload = load_checkpoint(reference_path, device)
    if policy_payload["vocab_size"] != ref_payload["vocab_size"]:
        raise BridgeConfigError(
            "tokenization mismatch: policy and reference checkpoints use different vocabularies"
        )
    policy.eval()
    reference.eval()
    max_len = min(policy.spec.max_seq_len, reference.spec.max_seq_len)

    pairs = load_pair_dataset(dataset_path)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if not pairs:
        logger.warning("scoring an empty dataset; writing empty %s", out_path)
        out_path.write_text("", encoding="utf-8")
        return {"n": 0, "beta": beta, "mean_loss": None, "mean_margin": None, "records": str(out_path)}

    rows: list[tuple[str, float, float, float, float]] = []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            idxs = list(range(start, min(start + batch_size, len(pairs))))
            lp_tw, lp_tl = _pair_logprobs(policy, pairs, idxs, max_len, device)
            lp_rw, lp_rl = _pair_logprobs(reference, pairs, idxs, max_len, device)
            for j, i in enumerate(idxs):
                rows.append(
                    (
                        pairs[i].id,
                        lp_tw[j].item(),
                        lp_tl[j].item(),
                        lp_rw[j].item(),
                        lp_rl[j].item(),
                    )
                )

    with out_path.open("w", encoding="utf-8") as fh:
        for sample_id, tw, tl, rw, rl in rows:
            fh.write(
                json.dumps(
                    {
                        "sample_id": sample_id,
                        "logp_theta_w": tw,
                        "logp_theta_l": tl,
                        "logp_ref_w": rw,
                        "logp_ref_l": rl,
                    }
                )
                + "\n"
            )

    # own-route loss over the exact serialized values, in float64
    tw = torch.tensor([r[1] for r in rows], dtype=torch.float64)
    tl = torch.tensor([r[2] for r in rows], dtype=torch.float64)
    rw = torch.tensor([r[3] for r in rows], dtype=torch.float64)
    rl = torch.tensor([r[4] for r in rows], dtype=torch.float64)
    margins = (tw - rw) - (tl - rl)
    mean_loss = F.softplus(-beta * margins).mean().item()
    summary = {
        "n": len(rows),
        "beta": beta,
        "mean_loss": mean_loss,
        "mean_margin": margins.mean().item(),
        "records": str(out_path),
    }
    logger.info("scored %d pairs -> %s (mean loss %.6f)", len(rows), out_path, mean_loss)
    return summary


def run_job(job: BridgeJob) -> dict:
    """Dispatch a job by stage; score jobs pull beta from the trainer
    config when one is given."""
    if job.stage == "sft":
        return train_sft(job)
    if job.stage == "dpo":
        return train_dpo(job)
    beta = job.beta
    if beta is None and job.config is not None:
        beta = float(read_trainer_config(job.config, "dpo")["beta"])
    if beta is None:
        beta = 0.1
    summary = score_logprobs(
        policy_path=job.policy,
        reference_path=job.reference,
        dataset_path=job.dataset,
        out_path=job.out_dir / "pref_scores.jsonl",
        beta=beta,
        batch_size=job.batch_size if job.batch_size is not None else 16,
        device=job.device,
    )
    job.out_dir.mkdir(parents=True, exist_ok=True)
    (job.out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return summary
