#!/usr/bin/env python3
"""Drive every pipeline stage end to end against the bundled mock
teacher server.

Creates a small values document, eval inputs, and score records in a
working directory, runs all nine CLI stages over real HTTP, then
reruns them to demonstrate that finished stages are skipped and that a
forced rerun is served from the response cache without network calls.
Exits nonzero on the first failure.
"""

import argparse
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

from docalign.align_math import (
    PrefScoreRecord,
    SftScoreRecord,
    write_pref_score_records,
    write_sft_score_records,
)
from docalign.cli import STAGES, main as cli_main
from docalign.mock_teacher import MockTeacherLogic, MockTeacherServer

logger = logging.getLogger("run_mock_pipeline")

VALUES_DOC = """\
# Our Commitments

## Honesty

We state facts plainly and correct errors fast. Our commitments require
us to disclose conflicts of interest in every engagement.

## Care

We treat every person with respect. Deadlines never excuse carelessness
toward the people our work affects.

## Stewardship

Resources entrusted to us are used for their stated purpose. We document
spending so any member can audit it.
"""


def write_inputs(workdir: Path, base_url: str) -> Path:
    (workdir / "values.md").write_text(VALUES_DOC, encoding="utf-8")

    refs = [
        {
            "prompt_id": f"p{i}",
            "prompt": f"What does commitment {i} require?",
            "reference": f"The reference answer number {i} restates the commitments.",
        }
        for i in range(4)
    ]
    (workdir / "refs.jsonl").write_text(
        "".join(json.dumps(r) + "\n" for r in refs), encoding="utf-8"
    )
    grounded = [
        {"prompt_id": f"p{i}", "response": f"The reference answer number {i} restates the commitments."}
        for i in range(4)
    ]
    ungrounded = [
        {"prompt_id": f"p{i}", "response": f"A different reply {i} about honesty."} for i in range(4)
    ]
    (workdir / "responses_grounded.jsonl").write_text(
        "".join(json.dumps(r) + "\n" for r in grounded), encoding="utf-8"
    )
    (workdir / "responses_ungrounded.jsonl").write_text(
        "".join(json.dumps(r) + "\n" for r in ungrounded), encoding="utf-8"
    )

    write_pref_score_records(
        [PrefScoreRecord(f"r{i}", -1.0 - i * 0.1, -2.0, -1.5, -1.8) for i in range(5)],
        workdir / "pref_scores.jsonl",
    )
    write_sft_score_records(
        [SftScoreRecord(f"s{i}", (-0.5, -1.25, -2.0)) for i in range(3)],
        workdir / "sft_scores.jsonl",
    )

    config = {
        "run_id": "mock",
        "out_dir": "runs",
        "keyword": "commitments",
        "use_case": "mock_case",
        "documents": [{"path": "values.md"}],
        "chunk": {"max_tokens": 64},
        "teacher": {"base_url": base_url, "model_id": "mock-teacher", "embed_model_id": "mock-embed"},
        "split": {"seed": 7, "group_by_chunk": False},
        "eval": {
            "references": "refs.jsonl",
            "methods": {
                "grounded": "responses_grounded.jsonl",
                "ungrounded": "responses_ungrounded.jsonl",
            },
            "judge": {"base_url": base_url, "model_id": "mock-judge", "resamples": 200},
        },
        "verify": {"pref_scores": "pref_scores.jsonl", "sft_scores": "sft_scores.jsonl"},
    }
    config_path = workdir / "config.yaml"
    config_path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return config_path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", help="working directory (default: a fresh temp dir)")
    parser.add_argument("--keep", action="store_true", help="keep the working directory afterwards")
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING)

    if args.workdir:
        workdir = Path(args.workdir)
        if workdir.exists():
            shutil.rmtree(workdir)
        workdir.mkdir(parents=True)
    else:
        workdir = Path(tempfile.mkdtemp(prefix="docalign-mock-"))

    logic = MockTeacherLogic()
    server = MockTeacherServer(logic)
    server.start()
    try:
        config_path = write_inputs(workdir, server.base_url)
        for stage in STAGES:
            rc = cli_main([stage, "--config", str(config_path)])
            if rc != 0:
                print(f"stage {stage} failed with exit code {rc}", file=sys.stderr)
                return 1
            print(f"{stage}: ok")

        before = logic.call_count
        for stage in STAGES:
            if cli_main([stage, "--config", str(config_path)]) != 0:
                print(f"stage {stage} failed on resume", file=sys.stderr)
                return 1
        if logic.call_count != before:
            print("resume made network calls; manifest skip is broken", file=sys.stderr)
            return 1
        print("resume: all stages skipped, no network calls")

        before = logic.call_count
        if cli_main(["gen-instruct", "--config", str(config_path), "--force"]) != 0:
            return 1
        if logic.call_count != before:
            print("forced rerun made network calls; response cache is broken", file=sys.stderr)
            return 1
        print("forced rerun: served entirely from cache")

        run_dir = workdir / "runs" / "mock"
        print(f"artifacts under {run_dir}:")
        for path in sorted(run_dir.rglob("*")):
            if path.is_file() and "cache" not in path.parts[-2]:
                print(f"  {path.relative_to(run_dir)}")
        return 0
    finally:
        server.stop()
        if not args.keep and not args.workdir:
            shutil.rmtree(workdir, ignore_errors=True)


if __name__ == "__main__":
    sys.exit(main())
