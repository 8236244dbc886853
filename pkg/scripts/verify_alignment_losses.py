#!/usr/bin/env python3
"""Recompute instruct and preference losses from score records.

Standalone cross-check for trainer output: reads the JSONL score
records a trainer emitted, recomputes the losses and the preference
gradient agreement, and prints the result as JSON. Useful when no
pipeline run directory exists; inside a run, prefer the verify-losses
CLI stage, which also records the result in the run manifest.
"""

import argparse
import json
import sys

from docalign.align_math import (
    GRAD_REL_TOL,
    DpoConfig,
    dpo_batch_loss,
    dpo_grad_check,
    read_pref_score_records,
    read_sft_score_records,
    sft_batch_nll,
)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--pref-scores", help="preference score records (JSONL)")
    parser.add_argument("--sft-scores", help="instruct score records (JSONL)")
    parser.add_argument("--beta", type=float, default=0.1, help="preference loss temperature")
    parser.add_argument("--grad-eps", type=float, default=1e-5, help="finite difference step")
    args = parser.parse_args(argv)
    if not args.pref_scores and not args.sft_scores:
        parser.error("at least one of --pref-scores / --sft-scores is required")

    result = {}
    if args.pref_scores:
        records = read_pref_score_records(args.pref_scores)
        config = DpoConfig(beta=args.beta)
        batch = dpo_batch_loss(records, config)
        stats = batch.margin_stats()
        max_rel_err = dpo_grad_check(records, config, eps=args.grad_eps)
        result["dpo"] = {
            "n": batch.n,
            "beta": batch.beta,
            "mean_loss": batch.mean_loss,
            "margin_mean": stats["mean"],
            "margin_min": stats["min"],
            "margin_max": stats["max"],
            "grad_max_rel_err": max_rel_err,
            "grad_ok": max_rel_err < GRAD_REL_TOL,
        }
    if args.sft_scores:
        records = read_sft_score_records(args.sft_scores)
        batch = sft_batch_nll(records)
        result["sft"] = {"n": batch.n, "sum_nll": batch.sum_loss, "mean_nll": batch.mean_loss}

    print(json.dumps(result, indent=2, sort_keys=True))
    ok = result.get("dpo", {}).get("grad_ok", True)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
