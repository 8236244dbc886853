import json
import time
from pathlib import Path

import pytest

from fixture_gen import (
    make_chat_dataset,
    make_pair_dataset,
    write_trainer_configs,
)
from trainer_bridge.jobs import BridgeJob, score_logprobs, train_dpo, train_sft


@pytest.fixture(scope="session")
def workspace(tmp_path_factory) -> dict:
    """Fixture datasets and trainer configs in the exported schemas."""
    root = tmp_path_factory.mktemp("bridge-fixtures")
    sft_config, dpo_config = write_trainer_configs(root)
    return {
        "root": root,
        "sft_config": sft_config,
        "dpo_config": dpo_config,
        "chat_train": make_chat_dataset(root / "sft_chat_train.jsonl", 200, seed=3),
        "pair_train": make_pair_dataset(root / "dpo_pairs_train.jsonl", 200, seed=4),
        "pair_val": make_pair_dataset(root / "dpo_pairs_val.jsonl", 40, seed=5, offset=1000),
    }


@pytest.fixture(scope="session")
def trained(workspace) -> dict:
    """The full chain, run once per session: supervised fine-tuning,
    preference training from the frozen checkpoint, then scoring of the
    held-out pairs under both the trained policy and the reference
    itself. The exported learning rates target full-scale models, so
    the desk-scale overrides below supply usable step sizes."""
    root = workspace["root"]
    started = time.monotonic()

    sft_summary = train_sft(
        BridgeJob(
            stage="sft",
            dataset=workspace["chat_train"],
            config=workspace["sft_config"],
            model_id="tiny-byte-decoder",
            out_dir=root / "sft",
            learning_rate=3e-3,
            max_epochs=1,
            seed=11,
        )
    )
    sft_checkpoint = Path(sft_summary["checkpoint"])

    dpo_summary = train_dpo(
        BridgeJob(
            stage="dpo",
            dataset=workspace["pair_train"],
            config=workspace["dpo_config"],
            model_id="tiny-byte-decoder",
            out_dir=root / "dpo",
            reference=sft_checkpoint,
            eval_dataset=workspace["pair_val"],
            learning_rate=1e-3,
            grad_accum=1,
            max_steps=60,
            seed=12,
        )
    )
    dpo_checkpoint = Path(dpo_summary["checkpoint"])

    score_summary = score_logprobs(
        policy_path=dpo_checkpoint,
        reference_path=sft_checkpoint,
        dataset_path=workspace["pair_val"],
        out_path=root / "scores" / "pref_scores.jsonl",
        beta=0.1,
    )
    self_score_summary = score_logprobs(
        policy_path=sft_checkpoint,
        reference_path=sft_checkpoint,
        dataset_path=workspace["pair_val"],
        out_path=root / "scores" / "pref_scores_self.jsonl",
        beta=0.1,
    )
    elapsed = time.monotonic() - started

    def read_log(path: Path) -> list[dict]:
        return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]

    return {
        "workspace": workspace,
        "sft": sft_summary,
        "dpo": dpo_summary,
        "score": score_summary,
        "self_score": self_score_summary,
        "sft_log": read_log(Path(sft_summary["train_log"])),
        "dpo_log": read_log(Path(dpo_summary["train_log"])),
        "scores_path": Path(score_summary["records"]),
        "self_scores_path": Path(self_score_summary["records"]),
        "sft_checkpoint": sft_checkpoint,
        "dpo_checkpoint": dpo_checkpoint,
        "elapsed": elapsed,
    }
