"""Command line entry point.

Each subcommand runs one pipeline stage against a config file and a
run directory derived from it. Completed stages are recorded in the
run manifest and skipped on rerun unless --force is given, so a
pipeline interrupted halfway resumes from the first unfinished stage.
On success the stage summary is printed to stdout as JSON; on failure
a machine-readable error object is printed to stderr and the exit
code is 2 for configuration problems, 1 for runtime ones.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .align_math import (
    GRAD_REL_TOL,
    DpoConfig,
    dpo_batch_loss,
    dpo_grad_check,
    export_trainer_config,
    read_pref_score_records,
    read_sft_score_records,
    sft_batch_nll,
)
from .config import ConfigError, PipelineConfig, load_config
from .curation import curate, export_dataset, import_dataset, write_report
from .ingest import chunk_document, load_document, read_chunks_jsonl, write_chunks_jsonl
from .judging import winrate_matrix
from .manifest import ManifestError, RunManifest
from .metrics import compute_metric_report
from .prompts import DEFAULT_JUDGE_RUBRIC
from .rag import build_index, write_index
from .sdg_instruct import InstructSdgConfig, build_sft_dataset
from .sdg_pref import PrefSdgConfig, build_pref_dataset
from .teacher import TeacherClient, TeacherConfig, TeacherError

logger = logging.getLogger(__name__)

STAGES = (
    "ingest",
    "gen-instruct",
    "gen-pref",
    "curate",
    "export",
    "rag-index",
    "eval-metrics",
    "eval-judge",
    "verify-losses",
)


class MissingArtifactError(Exception):
    """An earlier stage's output is required but absent."""


def _teacher_client(config: PipelineConfig, run_dir: Path) -> TeacherClient:
    teacher = config.teacher
    if teacher.cache_dir is None:
        teacher = TeacherConfig(
            base_url=teacher.base_url,
            model_id=teacher.model_id,
            api_key_env=teacher.api_key_env,
            max_concurrency=teacher.max_concurrency,
            retry=teacher.retry,
            cache_dir=str(run_dir / "teacher_cache"),
            timeout_s=teacher.timeout_s,
            embed_model_id=teacher.embed_model_id,
        )
    return TeacherClient(teacher)


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; {hint}")
    return path


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: not valid JSON: {exc}") from None
            if not isinstance(row, dict):
                raise ConfigError(f"{path}:{lineno}: expected an object")
            rows.append(row)
    return rows


def _scalar_counts(stats) -> dict:
    """Flatten SdgStats into scalar counters for the manifest."""
    return {
        key: (len(value) if isinstance(value, list) else value)
        for key, value in stats.as_dict().items()
    }


def _stage_ingest(config: PipelineConfig, run_dir: Path):
    chunks = []
    for spec in config.documents:
        doc = load_document(spec.path, format=spec.format, doc_id=spec.doc_id)
        doc_chunks = chunk_document(doc, config.chunk)
        logger.info("chunked %s into %d chunks", doc.doc_id, len(doc_chunks))
        chunks.extend(doc_chunks)
    out = run_dir / "chunks.jsonl"
    write_chunks_jsonl(chunks, out)
    counts = {"documents": len(config.documents), "chunks": len(chunks)}
    return {"chunks": "chunks.jsonl"}, counts, [], {}


def _stage_gen_instruct(config: PipelineConfig, run_dir: Path):
    chunks = read_chunks_jsonl(
        _need(run_dir / "chunks.jsonl", "run the ingest stage first"),
        token_estimator=config.chunk.token_estimator,
    )
    client = _teacher_client(config, run_dir)
    sdg = config.sdg
    sdg_config = InstructSdgConfig(
        keyword=config.keyword,
        nex=sdg.nex,
        calls_per_chunk=sdg.calls_per_chunk,
        question_decode=sdg.question_decode,
        answer_decode=sdg.answer_decode,
        question_seed=sdg.question_seed,
        template_dir=config.templates_dir,
    )
    samples, stats = build_sft_dataset(client, chunks, sdg_config)
    out = run_dir / "sft_raw.jsonl"
    export_dataset(samples, "sft_chat", out)
    return {"sft_raw": "sft_raw.jsonl"}, _scalar_counts(stats), stats.chunks_failed, client.usage_totals()


def _stage_gen_pref(config: PipelineConfig, run_dir: Path):
    chunks = read_chunks_jsonl(
        _need(run_dir / "chunks.jsonl", "run the ingest stage first"),
        token_estimator=config.chunk.token_estimator,
    )
    client = _teacher_client(config, run_dir)
    sdg = config.sdg
    sdg_config = PrefSdgConfig(
        keyword=config.keyword,
        nex=sdg.nex,
        calls_per_chunk=sdg.calls_per_chunk,
        pair_decode=sdg.pair_decode,
        filter_decode=sdg.filter_decode,
        pair_seed=sdg.pair_seed,
        template_dir=config.templates_dir,
    )
    samples, stats = build_pref_dataset(client, chunks, sdg_config)
    out = run_dir / "pref_raw.jsonl"
    export_dataset(samples, "dpo_pairs", out)
    return {"pref_raw": "pref_raw.jsonl"}, _scalar_counts(stats), stats.chunks_failed, client.usage_totals()


_CURATE_FAMILIES = (
    ("sft", "sft_raw.jsonl", "sft_chat"),
    ("pref", "pref_raw.jsonl", "dpo_pairs"),
)


def _stage_curate(config: PipelineConfig, run_dir: Path):
    datasets_dir = run_dir / "datasets"
    datasets_dir.mkdir(exist_ok=True)
    outputs = {}
    counts = {}
    found = False
    for family, raw_name, fmt in _CURATE_FAMILIES:
        raw_path = run_dir / raw_name
        if not raw_path.exists():
            continue
        found = True
        samples = import_dataset(raw_path, fmt)
        splits, report = curate(samples, config.split)
        for split_name, split_samples in splits.items():
            rel = f"datasets/{family}_{split_name}.jsonl"
            export_dataset(split_samples, fmt, run_dir / rel)
            outputs[f"{family}_{split_name}"] = rel
            counts[f"{family}_{split_name}"] = len(split_samples)
        report_rel = f"datasets/curation_report_{family}.json"
        write_report(report, run_dir / report_rel)
        outputs[f"{family}_report"] = report_rel
        counts[f"{family}_input"] = report.input_count
        counts[f"{family}_ill_formed"] = report.ill_formed_dropped
        counts[f"{family}_duplicates"] = report.duplicates_dropped
    if not found:
        raise MissingArtifactError(
            f"neither sft_raw.jsonl nor pref_raw.jsonl found in {run_dir}; "
            "run gen-instruct or gen-pref first"
        )
    return outputs, counts, [], {}


def _stage_export(config: PipelineConfig, run_dir: Path):
    exports_dir = run_dir / "exports"
    exports_dir.mkdir(exist_ok=True)
    outputs = {}
    counts = {}
    found = False
    for family, formats in (("sft", ("sft_chat",)), ("pref", ("dpo_pairs", "unpaired_pref"))):
        for split_name in ("train", "val", "test"):
            src = run_dir / "datasets" / f"{family}_{split_name}.jsonl"
            if not src.exists():
                continue
            found = True
            samples = import_dataset(src, formats[0])
            for fmt in formats:
                rel = f"exports/{fmt}_{split_name}.jsonl"
                export_dataset(samples, fmt, run_dir / rel)
                outputs[f"{fmt}_{split_name}"] = rel
                counts[f"{fmt}_{split_name}"] = len(samples)
    if not found:
        raise MissingArtifactError(f"no curated splits under {run_dir / 'datasets'}; run curate first")
    for stage_name in ("sft", "dpo"):
        path = export_trainer_config(config.use_case, stage_name, exports_dir)
        outputs[f"{stage_name}_trainer_config"] = f"exports/{path.name}"
    return outputs, counts, [], {}


def _stage_rag_index(config: PipelineConfig, run_dir: Path):
    chunks = read_chunks_jsonl(
        _need(run_dir / "chunks.jsonl", "run the ingest stage first"),
        token_estimator=config.chunk.token_estimator,
    )
    embedder = None
    if config.rag.mode == "embedding":
        if not config.teacher.embed_model_id:
            raise ConfigError("rag.mode embedding requires teacher.embed_model_id")
        client = _teacher_client(config, run_dir)
        embedder = client.embed
    index = build_index(chunks, mode=config.rag.mode, embedder=embedder)
    write_index(index, run_dir / "rag_index.json")
    return {"rag_index": "rag_index.json"}, {"chunks": index.size, "mode": config.rag.mode}, [], {}


def _load_eval_inputs(config: PipelineConfig):
    if not config.eval.references:
        raise ConfigError("eval.references is required for evaluation stages")
    if not config.eval.methods:
        raise ConfigError("eval.methods must name at least one response file")
    references = {}
    prompts = {}
    for row in _read_jsonl(Path(config.eval.references)):
        for key in ("prompt_id", "prompt", "reference"):
            if key not in row:
                raise ConfigError(f"reference rows need {key!r}: {row}")
        references[str(row["prompt_id"])] = str(row["reference"])
        prompts[str(row["prompt_id"])] = str(row["prompt"])
    responses_by_method = {}
    for method, path in sorted(config.eval.methods.items()):
        rows = _read_jsonl(Path(path))
        responses = {}
        for row in rows:
            if "prompt_id" not in row or "response" not in row:
                raise ConfigError(f"response rows need prompt_id and response: {path}")
            responses[str(row["prompt_id"])] = str(row["response"])
        missing = sorted(set(references) - set(responses))
        if missing:
            raise ConfigError(f"method {method!r} lacks responses for prompts: {', '.join(missing)}")
        responses_by_method[method] = responses
    return prompts, references, responses_by_method


def _stage_eval_metrics(config: PipelineConfig, run_dir: Path):
    _, references, responses_by_method = _load_eval_inputs(config)
    ids = sorted(references)
    refs = [references[i] for i in ids]
    embedder = None
    client = None
    if config.eval.embedding_f1:
        if config.teacher.embed_model_id:
            client = _teacher_client(config, run_dir)
            embedder = client.embed
        else:
            logger.warning("embedding F1 requested but teacher.embed_model_id is unset; skipping")
    report = {}
    for method, responses in responses_by_method.items():
        hyps = [responses[i] for i in ids]
        try:
            metric = compute_metric_report(hyps, refs, embedder=embedder)
        except TeacherError as exc:
            logger.warning("embedding F1 unavailable (%s); reporting lexical metrics only", exc)
            embedder = None
            metric = compute_metric_report(hyps, refs, embedder=None)
        report[method] = metric.as_dict()
    out = run_dir / "metrics_report.json"
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    usage = client.usage_totals() if client is not None else {}
    counts = {"methods": len(report), "prompts": len(ids)}
    return {"metrics_report": "metrics_report.json"}, counts, [], usage


def _stage_eval_judge(config: PipelineConfig, run_dir: Path):
    judge = config.eval.judge
    if judge is None:
        raise ConfigError("eval.judge must be configured for the eval-judge stage")
    prompts, _, responses_by_method = _load_eval_inputs(config)
    if len(responses_by_method) < 2:
        raise ConfigError("eval-judge needs at least two methods to compare")
    client = TeacherClient(
        TeacherConfig(
            base_url=judge.base_url,
            model_id=judge.model_id,
            api_key_env=judge.api_key_env,
            max_concurrency=judge.max_concurrency,
            cache_dir=str(run_dir / "judge_cache"),
            timeout_s=judge.timeout_s,
        )
    )
    table = winrate_matrix(
        client,
        prompts,
        responses_by_method,
        rubric=judge.rubric or DEFAULT_JUDGE_RUBRIC,
        resamples=judge.resamples,
        ci_level=judge.ci_level,
        bootstrap_seed=judge.bootstrap_seed,
        template_dir=config.templates_dir,
    )
    (run_dir / "winrates.json").write_text(
        json.dumps(table.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (run_dir / "winrates.csv").write_text(table.to_csv(), encoding="utf-8")
    parse_failures = sum(cell.parse_failures for cell in table.cells.values()) // 2
    counts = {
        "methods": len(table.methods),
        "prompts": len(prompts),
        "verdicts": len(table.verdicts),
        "parse_failures": parse_failures,
    }
    outputs = {"winrates_json": "winrates.json", "winrates_csv": "winrates.csv"}
    return outputs, counts, [], client.usage_totals()


def _stage_verify_losses(config: PipelineConfig, run_dir: Path, overrides: dict | None = None):
    overrides = overrides or {}
    verify = config.verify
    pref_path = overrides.get("pref_scores") or verify.pref_scores
    sft_path = overrides.get("sft_scores") or verify.sft_scores
    beta = overrides.get("beta") if overrides.get("beta") is not None else verify.beta
    eps = overrides.get("grad_eps") if overrides.get("grad_eps") is not None else verify.grad_eps
    if not pref_path and not sft_path:
        raise ConfigError(
            "verify-losses needs verify.pref_scores or verify.sft_scores "
            "(or --pref-scores/--sft-scores)"
        )
    result = {}
    counts = {}
    if pref_path:
        records = read_pref_score_records(_need(Path(pref_path), "no preference score records"))
        dpo_config = DpoConfig(beta=float(beta))
        batch = dpo_batch_loss(records, dpo_config)
        stats = batch.margin_stats()
        max_rel_err = dpo_grad_check(records, dpo_config, eps=float(eps))
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
        counts["pref_records"] = batch.n
    if sft_path:
        records = read_sft_score_records(_need(Path(sft_path), "no sft score records"))
        batch = sft_batch_nll(records)
        result["sft"] = {"n": batch.n, "sum_nll": batch.sum_loss, "mean_nll": batch.mean_loss}
        counts["sft_records"] = batch.n
    out = run_dir / "verify_losses.json"
    out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"verify_losses": "verify_losses.json"}, counts, [], {}


_STAGE_FNS = {
    "ingest": _stage_ingest,
    "gen-instruct": _stage_gen_instruct,
    "gen-pref": _stage_gen_pref,
    "curate": _stage_curate,
    "export": _stage_export,
    "rag-index": _stage_rag_index,
    "eval-metrics": _stage_eval_metrics,
    "eval-judge": _stage_eval_judge,
    "verify-losses": _stage_verify_losses,
}


def run_stage(
    stage: str,
    config: PipelineConfig,
    force: bool = False,
    overrides: dict | None = None,
) -> dict:
    """Run one pipeline stage under the run manifest, returning its
    manifest entry. Finished stages are skipped unless forced or given
    explicit overrides."""
    if stage not in _STAGE_FNS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    run_dir = config.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.load_or_create(run_dir, config.run_id, config.config_hash)
    if manifest.is_done(stage) and not force and not overrides:
        logger.info("stage %s already done for run %s; skipping", stage, config.run_id)
        entry = dict(manifest.stages[stage])
        entry["skipped"] = True
        return entry
    manifest.begin(stage)
    manifest.save(run_dir)
    logger.info("running stage %s for run %s", stage, config.run_id)
    try:
        if stage == "verify-losses":
            outputs, counts, failures, usage = _STAGE_FNS[stage](config, run_dir, overrides)
        else:
            outputs, counts, failures, usage = _STAGE_FNS[stage](config, run_dir)
    except Exception as exc:
        manifest.fail(stage, f"{type(exc).__name__}: {exc}")
        manifest.save(run_dir)
        raise
    entry = manifest.finish(stage, outputs, counts, failures, usage)
    manifest.save(run_dir)
    logger.info("stage %s done: %s", stage, counts)
    return dict(entry)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="docalign",
        description="Generate, curate, and evaluate alignment data grounded in a values document.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="stage", required=True, metavar="STAGE")
    for stage in STAGES:
        stage_parser = sub.add_parser(stage, help=f"run the {stage} stage")
        stage_parser.add_argument("--config", required=True, help="path to the pipeline config file")
        stage_parser.add_argument(
            "--force", action="store_true", help="rerun the stage even if the manifest marks it done"
        )
        stage_parser.add_argument("--verbose", action="store_true", help="debug logging")
        if stage == "verify-losses":
            stage_parser.add_argument("--pref-scores", help="preference score records (JSONL)")
            stage_parser.add_argument("--sft-scores", help="sft score records (JSONL)")
            stage_parser.add_argument("--beta", type=float, help="preference loss temperature")
            stage_parser.add_argument("--grad-eps", type=float, help="finite difference step")
    return parser


_CONFIG_ERRORS = (ConfigError, ManifestError)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = None
    if args.stage == "verify-losses":
        overrides = {
            key: value
            for key, value in (
                ("pref_scores", args.pref_scores),
                ("sft_scores", args.sft_scores),
                ("beta", args.beta),
                ("grad_eps", args.grad_eps),
            )
            if value is not None
        }
    try:
        config = load_config(args.config)
        entry = run_stage(args.stage, config, force=args.force, overrides=overrides)
    except Exception as exc:
        payload = {
            "error": {
                "type": type(exc).__name__,
                "message": str(exc),
                "stage": args.stage,
            }
        }
        print(json.dumps(payload), file=sys.stderr)
        logger.debug("stage %s failed", args.stage, exc_info=exc)
        return 2 if isinstance(exc, _CONFIG_ERRORS) else 1
    summary = {"stage": args.stage, "run_id": config.run_id, "status": entry.get("status")}
    if entry.get("skipped"):
        summary["skipped"] = True
    summary["outputs"] = entry.get("outputs", {})
    summary["counts"] = entry.get("counts", {})
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
