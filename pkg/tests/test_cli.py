"""Config loading, run manifest, and the staged command line pipeline.

The end-to-end test drives every stage of the real CLI against a mock
teacher served over an actual localhost socket, then checks resumption,
forced reruns, and the exit-code contract.
"""

from __future__ import annotations

import json
import logging
import math

import pytest

from conftest import VALUES_DOC
from docalign.align_math import PrefScoreRecord, write_pref_score_records
from docalign.cli import STAGES, MissingArtifactError, main, run_stage
from docalign.config import ConfigError, load_config, validate_config
from docalign.manifest import ManifestError, RunManifest
from docalign.mock_teacher import MockTeacherLogic, MockTeacherServer


@pytest.fixture(autouse=True)
def isolated_root_logger():
    # main() calls logging.basicConfig against sys.stderr; clear root
    # handlers around each test so captured streams never go stale
    root = logging.getLogger()
    saved = root.handlers[:]
    for handler in saved:
        root.removeHandler(handler)
    yield
    for handler in root.handlers[:]:
        root.removeHandler(handler)
    for handler in saved:
        root.addHandler(handler)


def base_config(base_url: str) -> dict:
    return {
        "run_id": "run1",
        "keyword": "values",
        "documents": ["values.md"],
        "chunk": {"max_tokens": 64},
        "teacher": {
            "base_url": base_url,
            "model_id": "mock-teacher",
            "embed_model_id": "mock-embed",
        },
        "split": {"seed": 5, "group_by_chunk": False},
    }


def write_workspace(tmp_path, config: dict):
    (tmp_path / "values.md").write_text(VALUES_DOC, encoding="utf-8")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return path


def last_stderr_json(capsys) -> dict:
    err = capsys.readouterr().err.strip()
    return json.loads(err.split("\n")[-1])


def stdout_json(capsys) -> dict:
    return json.loads(capsys.readouterr().out.strip().split("\n")[-1])


# === config validation ===


def test_load_config_fills_defaults(tmp_path):
    path = write_workspace(tmp_path, base_config("http://teacher.test"))
    config = load_config(path)
    assert config.run_id == "run1"
    assert config.sdg.nex == 5
    assert config.sdg.question_seed == 17
    assert config.sdg.pair_seed == 29
    assert config.rag.mode == "lexical" and config.rag.k == 1
    assert config.verify.beta == 0.1
    assert config.use_case == "run1"
    assert config.documents[0].path == str(tmp_path / "values.md")
    assert config.run_dir == tmp_path / "runs" / "run1"


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.yaml")


def test_config_rejects_unknown_keys(tmp_path):
    raw = base_config("http://t")
    raw["extra_knob"] = 1
    with pytest.raises(ConfigError, match="unknown keys under config: extra_knob"):
        validate_config(raw, tmp_path)
    raw = base_config("http://t")
    raw["teacher"]["modell"] = "typo"
    with pytest.raises(ConfigError, match="unknown keys under teacher: modell"):
        validate_config(raw, tmp_path)
    raw = base_config("http://t")
    raw["sdg"] = {"question_decode": {"temprature": 2.0}}
    with pytest.raises(ConfigError, match="unknown keys under sdg.question_decode"):
        validate_config(raw, tmp_path)


def test_config_requires_core_keys(tmp_path):
    raw = base_config("http://t")
    del raw["run_id"]
    del raw["keyword"]
    with pytest.raises(ConfigError, match="missing required keys under config"):
        validate_config(raw, tmp_path)


def test_config_validates_split(tmp_path):
    raw = base_config("http://t")
    raw["split"] = {"train_frac": 0.8, "val_frac": 0.1, "test_frac": 0.1}
    with pytest.raises(ConfigError, match="split.seed is required"):
        validate_config(raw, tmp_path)
    raw["split"] = {"seed": 1, "train_frac": 0.9, "val_frac": 0.2, "test_frac": 0.1}
    with pytest.raises(ConfigError, match="split"):
        validate_config(raw, tmp_path)


def test_config_validates_keyword_and_rag(tmp_path):
    raw = base_config("http://t")
    raw["keyword"] = "   "
    with pytest.raises(ConfigError, match="keyword must be non-empty"):
        validate_config(raw, tmp_path)
    raw = base_config("http://t")
    raw["rag"] = {"mode": "sparse"}
    with pytest.raises(ConfigError, match="rag.mode"):
        validate_config(raw, tmp_path)
    raw = base_config("http://t")
    raw["rag"] = {"k": 0}
    with pytest.raises(ConfigError, match="rag.k"):
        validate_config(raw, tmp_path)


def test_config_document_forms(tmp_path):
    raw = base_config("http://t")
    raw["documents"] = [{"path": "values.md", "doc_id": "handbook"}]
    config = validate_config(raw, tmp_path)
    assert config.documents[0].doc_id == "handbook"
    raw["documents"] = []
    with pytest.raises(ConfigError, match="missing required keys under config: documents"):
        validate_config(raw, tmp_path)


def test_config_hash_tracks_content(tmp_path):
    raw = base_config("http://t")
    first = validate_config(raw, tmp_path).config_hash
    again = validate_config(raw, tmp_path).config_hash
    raw["keyword"] = "duties"
    changed = validate_config(raw, tmp_path).config_hash
    assert first == again
    assert first != changed


def test_config_rejects_bad_yaml_and_non_mapping(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("run_id: [unclosed", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid YAML"):
        load_config(bad)
    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("- just\n- a list\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="mapping at the top level"):
        load_config(scalar)


def test_config_decode_section_override(tmp_path):
    raw = base_config("http://t")
    raw["sdg"] = {"nex": 3, "question_decode": {"temperature": 0.7, "seed": 99}}
    config = validate_config(raw, tmp_path)
    assert config.sdg.nex == 3
    assert config.sdg.question_decode.temperature == 0.7
    assert config.sdg.question_decode.seed == 99
    assert config.sdg.question_decode.mode == "nucleus"
    assert config.sdg.answer_decode.mode == "greedy"


# === manifest ===


def test_manifest_load_errors(tmp_path):
    with pytest.raises(ManifestError, match="no manifest"):
        RunManifest.load(tmp_path)
    (tmp_path / "manifest.json").write_text("{broken", encoding="utf-8")
    with pytest.raises(ManifestError, match="corrupt"):
        RunManifest.load(tmp_path)
    (tmp_path / "manifest.json").write_text('{"run_id": "x"}', encoding="utf-8")
    with pytest.raises(ManifestError, match="missing"):
        RunManifest.load(tmp_path)


def test_manifest_roundtrip_and_stage_lifecycle(tmp_path):
    manifest = RunManifest.load_or_create(tmp_path, "r1", "hash1")
    assert not manifest.is_done("ingest")
    manifest.begin("ingest")
    manifest.finish("ingest", {"chunks": "chunks.jsonl"}, {"chunks": 4}, [], {})
    manifest.save(tmp_path)
    loaded = RunManifest.load(tmp_path)
    assert loaded.is_done("ingest")
    assert loaded.stages["ingest"]["counts"] == {"chunks": 4}
    assert not list(tmp_path.glob("*.tmp"))


def test_manifest_refuses_changed_config(tmp_path):
    RunManifest.load_or_create(tmp_path, "r1", "hash1")
    with pytest.raises(ManifestError, match="different configuration"):
        RunManifest.load_or_create(tmp_path, "r1", "hash2")


def test_manifest_fail_records_error(tmp_path):
    manifest = RunManifest.load_or_create(tmp_path, "r1", "h")
    manifest.begin("curate")
    manifest.fail("curate", "MissingArtifactError: nothing to curate")
    assert not manifest.is_done("curate")
    assert manifest.stages["curate"]["status"] == "failed"
    assert "MissingArtifactError" in manifest.stages["curate"]["error"]


# === stage sequencing and exit codes ===


def test_unknown_stage_rejected(tmp_path):
    path = write_workspace(tmp_path, base_config("http://t"))
    config = load_config(path)
    with pytest.raises(ConfigError, match="unknown stage"):
        run_stage("train", config)


def test_stage_before_ingest_fails_with_hint(tmp_path, capsys):
    # the missing-artifact check fires before any network use
    path = write_workspace(tmp_path, base_config("http://t"))
    code = main(["gen-instruct", "--config", str(path)])
    assert code == 1
    error = last_stderr_json(capsys)["error"]
    assert error["type"] == "MissingArtifactError"
    assert "run the ingest stage first" in error["message"]
    manifest = RunManifest.load(tmp_path / "runs" / "run1")
    assert manifest.stages["gen-instruct"]["status"] == "failed"


def test_config_error_exits_2(tmp_path, capsys):
    raw = base_config("http://t")
    raw["surprise"] = True
    path = write_workspace(tmp_path, raw)
    code = main(["ingest", "--config", str(path)])
    assert code == 2
    assert last_stderr_json(capsys)["error"]["type"] == "ConfigError"


def test_changed_config_hash_exits_2(tmp_path, capsys):
    path = write_workspace(tmp_path, base_config("http://t"))
    assert main(["ingest", "--config", str(path)]) == 0
    raw = base_config("http://t")
    raw["keyword"] = "duties"
    path.write_text(json.dumps(raw), encoding="utf-8")
    code = main(["ingest", "--config", str(path)])
    assert code == 2
    error = last_stderr_json(capsys)["error"]
    assert error["type"] == "ManifestError"
    assert "different configuration" in error["message"]


def test_resume_skips_and_force_reruns(tmp_path, capsys):
    path = write_workspace(tmp_path, base_config("http://t"))
    assert main(["ingest", "--config", str(path)]) == 0
    first = stdout_json(capsys)
    assert "skipped" not in first
    assert first["counts"] == {"documents": 1, "chunks": 4}

    assert main(["ingest", "--config", str(path)]) == 0
    second = stdout_json(capsys)
    assert second["skipped"] is True
    assert second["counts"] == {"documents": 1, "chunks": 4}

    assert main(["ingest", "--config", str(path), "--force"]) == 0
    third = stdout_json(capsys)
    assert "skipped" not in third


# === full pipeline over a real socket ===


def eval_files(tmp_path):
    references = [
        {
            "prompt_id": "p0",
            "prompt": "What does fair treatment require?",
            "reference": "Every request is handled in the order received and honestly.",
        },
        {
            "prompt_id": "p1",
            "prompt": "How are records corrected?",
            "reference": "Corrections are appended so the trail stays auditable.",
        },
        {
            "prompt_id": "p2",
            "prompt": "What happens when no commitment applies?",
            "reference": "Say so plainly instead of inventing a rule.",
        },
    ]
    (tmp_path / "references.jsonl").write_text(
        "".join(json.dumps(r) + "\n" for r in references), encoding="utf-8"
    )
    grounded = [
        {"prompt_id": r["prompt_id"], "response": r["reference"]} for r in references
    ]
    vague = [
        {"prompt_id": r["prompt_id"], "response": "It depends on several local factors."}
        for r in references
    ]
    (tmp_path / "responses_grounded.jsonl").write_text(
        "".join(json.dumps(r) + "\n" for r in grounded), encoding="utf-8"
    )
    (tmp_path / "responses_vague.jsonl").write_text(
        "".join(json.dumps(r) + "\n" for r in vague), encoding="utf-8"
    )


def full_config(base_url: str) -> dict:
    config = base_config(base_url)
    config["eval"] = {
        "references": "references.jsonl",
        "methods": {
            "grounded": "responses_grounded.jsonl",
            "vague": "responses_vague.jsonl",
        },
        "judge": {"base_url": base_url, "model_id": "mock-judge", "resamples": 50},
    }
    config["verify"] = {"pref_scores": "pref_scores.jsonl"}
    return config


def zero_margin_records(path, n=4):
    records = [
        PrefScoreRecord(f"s{i}", -1.0 - i, -2.0 - i, -1.0 - i, -2.0 - i) for i in range(n)
    ]
    write_pref_score_records(records, path)


def test_full_pipeline_end_to_end(tmp_path, capsys):
    logic = MockTeacherLogic(judge_policy="hash")
    with MockTeacherServer(logic) as server:
        path = write_workspace(tmp_path, full_config(server.base_url))
        eval_files(tmp_path)
        zero_margin_records(tmp_path / "pref_scores.jsonl")
        run_dir = tmp_path / "runs" / "run1"

        summaries = {}
        for stage in STAGES:
            assert main([stage, "--config", str(path)]) == 0, stage
            summaries[stage] = stdout_json(capsys)

        # ingest: the title section plus three body sections
        assert summaries["ingest"]["counts"]["chunks"] == 4
        assert (run_dir / "chunks.jsonl").exists()

        # generation: 4 chunks x 5 questions, one call per chunk plus
        # one answer call per question
        gen = summaries["gen-instruct"]["counts"]
        assert gen["samples"] == 20
        assert gen["chunks_failed"] == 0
        usage = RunManifest.load(run_dir).stages["gen-instruct"]["token_usage"]
        assert usage["network_calls"] == 24
        assert usage["cache_hits"] == 0

        pref = summaries["gen-pref"]["counts"]
        assert pref["samples"] == 20
        assert pref["chunks_filtered_out"] == 0

        # curation: 20 clean samples split 16/2/2 per family
        cur = summaries["curate"]["counts"]
        for family in ("sft", "pref"):
            assert cur[f"{family}_input"] == 20
            assert cur[f"{family}_ill_formed"] == 0
            assert cur[f"{family}_duplicates"] == 0
            assert [cur[f"{family}_{s}"] for s in ("train", "val", "test")] == [16, 2, 2]

        exp = summaries["export"]["counts"]
        assert exp["sft_chat_train"] == 16
        assert exp["dpo_pairs_train"] == 16
        assert exp["unpaired_pref_train"] == 16
        assert (run_dir / "exports" / "run1_sft_trainer_config.json").exists()
        assert (run_dir / "exports" / "run1_dpo_trainer_config.json").exists()

        assert summaries["rag-index"]["counts"] == {"chunks": 4, "mode": "lexical"}

        metrics = json.loads((run_dir / "metrics_report.json").read_text("utf-8"))
        assert set(metrics) == {"grounded", "vague"}
        assert metrics["grounded"]["bleu"] == 100.0
        assert metrics["grounded"]["rouge1"] == 1.0
        assert metrics["grounded"]["embed_f1"] == pytest.approx(1.0, abs=1e-9)
        assert metrics["vague"]["bleu"] < 50.0

        judge = summaries["eval-judge"]["counts"]
        assert judge == {
            "methods": 2, "prompts": 3, "verdicts": 6, "parse_failures": 0,
        }
        table = json.loads((run_dir / "winrates.json").read_text("utf-8"))
        rates = {
            (c["method_a"], c["method_b"]): c["rate"] for c in table["cells"]
        }
        assert rates[("grounded", "vague")] + rates[("vague", "grounded")] == 1.0
        assert (run_dir / "winrates.csv").read_text("utf-8").startswith("method,")

        verify = json.loads((run_dir / "verify_losses.json").read_text("utf-8"))
        assert verify["dpo"]["n"] == 4
        assert verify["dpo"]["mean_loss"] == pytest.approx(math.log(2.0), abs=1e-12)
        assert verify["dpo"]["grad_ok"] is True

        manifest = RunManifest.load(run_dir)
        assert all(manifest.is_done(stage) for stage in STAGES)
        assert all(manifest.stages[s]["failures"] == [] for s in ("gen-instruct", "gen-pref"))

        # resumption: every stage skips; no stage touches the network
        calls_after_run = logic.call_count
        for stage in STAGES:
            assert main([stage, "--config", str(path)]) == 0, stage
            assert stdout_json(capsys)["skipped"] is True
        assert logic.call_count == calls_after_run

        # forced regeneration is served entirely from the warm cache
        assert main(["gen-instruct", "--config", str(path), "--force"]) == 0
        assert stdout_json(capsys)["counts"]["samples"] == 20
        assert logic.call_count == calls_after_run
        usage = RunManifest.load(run_dir).stages["gen-instruct"]["token_usage"]
        assert usage["network_calls"] == 0
        assert usage["cache_hits"] == 24


def test_verify_losses_flag_overrides(tmp_path, capsys):
    config = base_config("http://t")
    config["verify"] = {"pref_scores": "pref_scores.jsonl"}
    path = write_workspace(tmp_path, config)
    zero_margin_records(tmp_path / "pref_scores.jsonl", n=4)
    zero_margin_records(tmp_path / "other_scores.jsonl", n=2)

    assert main(["verify-losses", "--config", str(path)]) == 0
    assert stdout_json(capsys)["counts"] == {"pref_records": 4}

    # explicit flags bypass the manifest skip and the config path
    code = main(
        [
            "verify-losses",
            "--config",
            str(path),
            "--pref-scores",
            str(tmp_path / "other_scores.jsonl"),
        ]
    )
    assert code == 0
    summary = stdout_json(capsys)
    assert "skipped" not in summary
    assert summary["counts"] == {"pref_records": 2}


def test_verify_losses_needs_some_scores(tmp_path, capsys):
    path = write_workspace(tmp_path, base_config("http://t"))
    code = main(["verify-losses", "--config", str(path)])
    assert code == 2
    error = last_stderr_json(capsys)["error"]
    assert error["type"] == "ConfigError"
    assert "pref_scores" in error["message"]


def test_verify_losses_sft_records(tmp_path, capsys):
    from docalign.align_math import SftScoreRecord, write_sft_score_records

    config = base_config("http://t")
    config["verify"] = {"sft_scores": "sft_scores.jsonl"}
    path = write_workspace(tmp_path, config)
    write_sft_score_records(
        [SftScoreRecord("a", (-1.0, -2.0)), SftScoreRecord("b", (-0.5,))],
        tmp_path / "sft_scores.jsonl",
    )
    assert main(["verify-losses", "--config", str(path)]) == 0
    assert stdout_json(capsys)["counts"] == {"sft_records": 2}
    result = json.loads(
        (tmp_path / "runs" / "run1" / "verify_losses.json").read_text("utf-8")
    )
    assert result["sft"]["sum_nll"] == pytest.approx(3.5, abs=1e-12)


def test_eval_metrics_requires_references(tmp_path, capsys):
    path = write_workspace(tmp_path, base_config("http://t"))
    code = main(["eval-metrics", "--config", str(path)])
    assert code == 2
    assert "references" in last_stderr_json(capsys)["error"]["message"]
