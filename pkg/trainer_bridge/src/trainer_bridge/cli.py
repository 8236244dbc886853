"""Command line front end.

Three subcommands mirror the three job stages:

    trainer-bridge sft   --dataset sft_chat_train.jsonl --trainer-config x_sft_trainer_config.json --out-dir runs/sft
    trainer-bridge dpo   --dataset dpo_pairs_train.jsonl --trainer-config x_dpo_trainer_config.json \
                         --reference runs/sft/checkpoint.pt --out-dir runs/dpo
    trainer-bridge score --dataset dpo_pairs_val.jsonl --policy runs/dpo/checkpoint.pt \
                         --reference runs/sft/checkpoint.pt --out-dir runs/score

On success the job summary is printed as one JSON line on stdout. On
failure a JSON error object is printed on stderr; exit code 2 means bad
configuration or data, 1 means a runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from trainer_bridge.errors import BridgeConfigError, BridgeDataError, BridgeError
from trainer_bridge.jobs import BridgeJob, run_job

logger = logging.getLogger(__name__)


def _add_common(parser: argparse.ArgumentParser, stage: str) -> None:
    parser.add_argument("--dataset", required=True, help="input dataset JSONL")
    parser.add_argument("--out-dir", required=True, help="directory for artifacts")
    parser.add_argument("--model-id", default="tiny-byte-decoder")
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--device", default="cpu", choices=("cpu", "cuda"))
    parser.add_argument("--batch-size", type=int, default=None, help="override the trainer config")
    parser.add_argument("--verbose", action="store_true")
    if stage in ("sft", "dpo"):
        parser.add_argument("--trainer-config", required=True, help="exported trainer-config JSON")
        parser.add_argument("--learning-rate", type=float, default=None, help="override the trainer config")
        parser.add_argument("--grad-accum", type=int, default=None, help="override the trainer config")
        parser.add_argument("--max-steps", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trainer-bridge",
        description="Train a small model on exported alignment datasets and emit auditable score records.",
    )
    sub = parser.add_subparsers(dest="stage", required=True)

    sft = sub.add_parser("sft", help="supervised fine-tuning on a chat dataset")
    _add_common(sft, "sft")
    sft.add_argument("--max-epochs", type=int, default=None, help="override the trainer config")

    dpo = sub.add_parser("dpo", help="preference optimization against a frozen reference")
    _add_common(dpo, "dpo")
    dpo.add_argument("--reference", required=True, help="sft checkpoint to start from and compare against")
    dpo.add_argument("--eval-dataset", default=None, help="held-out pairs for margin tracking")
    dpo.add_argument("--beta", type=float, default=None, help="override the trainer config")

    score = sub.add_parser("score", help="emit per-pair score records under policy and reference")
    _add_common(score, "score")
    score.add_argument("--policy", required=True, help="checkpoint to score as the policy")
    score.add_argument("--reference", required=True, help="checkpoint to score as the reference")
    score.add_argument("--trainer-config", default=None, help="optional; supplies beta")
    score.add_argument("--beta", type=float, default=None, help="used when no trainer config is given")
    return parser


def _job_from_args(args: argparse.Namespace) -> BridgeJob:
    return BridgeJob(
        stage=args.stage,
        dataset=args.dataset,
        config=getattr(args, "trainer_config", None),
        model_id=args.model_id,
        out_dir=args.out_dir,
        reference=getattr(args, "reference", None),
        policy=getattr(args, "policy", None),
        eval_dataset=getattr(args, "eval_dataset", None),
        seed=args.seed,
        device=args.device,
        learning_rate=getattr(args, "learning_rate", None),
        batch_size=args.batch_size,
        grad_accum=getattr(args, "grad_accum", None),
        beta=getattr(args, "beta", None),
        max_epochs=getattr(args, "max_epochs", None),
        max_steps=getattr(args, "max_steps", None),
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        summary = run_job(_job_from_args(args))
    except (BridgeConfigError, BridgeDataError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except BridgeError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"stage": args.stage, **summary}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
