"""Pipeline configuration: one structured key-value file drives a run.

Loaded from YAML (JSON is a subset), validated strictly: unknown keys
are rejected with their location, defaults are filled in, and the
defaulted logical content is hashed so a run directory can detect a
changed configuration. Relative paths are resolved against the config
file's directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .curation import SplitSpec
from .ingest import ChunkPolicy
from .teacher import DecodeParams, RetryPolicy, TeacherConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class DocumentSpec:
    path: str
    format: str | None = None
    doc_id: str | None = None


@dataclass(frozen=True)
class SdgSection:
    nex: int = 5
    calls_per_chunk: int = 1
    question_seed: int = 17
    pair_seed: int = 29
    question_decode: DecodeParams = field(default_factory=lambda: DecodeParams.nucleus())
    answer_decode: DecodeParams = field(default_factory=DecodeParams.greedy)
    pair_decode: DecodeParams = field(default_factory=lambda: DecodeParams.nucleus())
    filter_decode: DecodeParams = field(default_factory=lambda: DecodeParams.greedy(max_tokens=8))


@dataclass(frozen=True)
class RagSection:
    mode: str = "lexical"
    k: int = 1

    def __post_init__(self):
        if self.mode not in ("lexical", "embedding"):
            raise ConfigError(f"rag.mode must be lexical or embedding, got {self.mode!r}")
        if self.k < 1:
            raise ConfigError("rag.k must be >= 1")


@dataclass(frozen=True)
class JudgeSection:
    base_url: str
    model_id: str
    api_key_env: str = "JUDGE_API_KEY"
    rubric: str | None = None
    resamples: int = 1000
    ci_level: float = 0.95
    bootstrap_seed: int = 13
    max_concurrency: int = 4
    timeout_s: float = 60.0


@dataclass(frozen=True)
class EvalSection:
    references: str | None = None
    methods: dict = field(default_factory=dict)
    embedding_f1: bool = True
    judge: JudgeSection | None = None


@dataclass(frozen=True)
class VerifySection:
    pref_scores: str | None = None
    sft_scores: str | None = None
    beta: float = 0.1
    grad_eps: float = 1e-5


@dataclass(frozen=True)
class PipelineConfig:
    run_id: str
    keyword: str
    documents: tuple[DocumentSpec, ...]
    teacher: TeacherConfig
    split: SplitSpec
    out_dir: str = "runs"
    use_case: str = ""
    chunk: ChunkPolicy = field(default_factory=ChunkPolicy)
    sdg: SdgSection = field(default_factory=SdgSection)
    rag: RagSection = field(default_factory=RagSection)
    eval: EvalSection = field(default_factory=EvalSection)
    verify: VerifySection = field(default_factory=VerifySection)
    templates_dir: str | None = None
    config_hash: str = ""

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.run_id


def _take(raw: dict, allowed: dict, context: str) -> dict:
    """Return raw merged over defaults, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{context} must be a mapping, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys under {context}: {', '.join(unknown)}")
    merged = dict(allowed)
    merged.update(raw)
    return merged


def _require(merged: dict, keys: list[str], context: str) -> None:
    missing = [k for k in keys if merged[k] in (None, "", [])]
    if missing:
        raise ConfigError(f"missing required keys under {context}: {', '.join(missing)}")


def _decode_params(raw, context: str, default: DecodeParams) -> DecodeParams:
    if raw is None:
        return default
    merged = _take(
        raw,
        {
            "mode": default.mode,
            "temperature": default.temperature,
            "top_p": default.top_p,
            "max_tokens": default.max_tokens,
            "seed": default.seed,
        },
        context,
    )
    try:
        return DecodeParams(**merged)
    except ValueError as exc:
        raise ConfigError(f"{context}: {exc}") from None


def validate_config(raw: dict, base_dir: str | Path = ".") -> PipelineConfig:
    """Build a PipelineConfig from a parsed mapping, filling defaults,
    rejecting unknown keys, and computing the content hash."""
    base = Path(base_dir)
    top = _take(
        raw,
        {
            "run_id": None,
            "out_dir": "runs",
            "keyword": None,
            "use_case": None,
            "documents": None,
            "chunk": None,
            "teacher": None,
            "sdg": None,
            "split": None,
            "rag": None,
            "eval": None,
            "verify": None,
            "templates_dir": None,
        },
        "config",
    )
    _require(top, ["run_id", "keyword", "documents", "teacher", "split"], "config")

    if not isinstance(top["documents"], list) or not top["documents"]:
        raise ConfigError("documents must be a non-empty list")
    documents = []
    for i, doc in enumerate(top["documents"]):
        if isinstance(doc, str):
            doc = {"path": doc}
        merged = _take(doc, {"path": None, "format": None, "doc_id": None}, f"documents[{i}]")
        _require(merged, ["path"], f"documents[{i}]")
        documents.append(
            DocumentSpec(
                path=str(base / merged["path"]), format=merged["format"], doc_id=merged["doc_id"]
            )
        )

    chunk_raw = _take(
        top["chunk"] or {},
        {"max_tokens": 512, "split_on_headings": True, "token_estimator": "whitespace"},
        "chunk",
    )
    try:
        chunk = ChunkPolicy(**chunk_raw)
    except ValueError as exc:
        raise ConfigError(f"chunk: {exc}") from None

    teacher_raw = _take(
        top["teacher"],
        {
            "base_url": None,
            "model_id": None,
            "api_key_env": "TEACHER_API_KEY",
            "max_concurrency": 4,
            "retry": None,
            "cache_dir": None,
            "timeout_s": 60.0,
            "embed_model_id": None,
        },
        "teacher",
    )
    _require(teacher_raw, ["base_url", "model_id"], "teacher")
    retry_raw = _take(
        teacher_raw.pop("retry") or {}, {"max_attempts": 4, "base_backoff_ms": 250}, "teacher.retry"
    )
    try:
        teacher = TeacherConfig(retry=RetryPolicy(**retry_raw), **teacher_raw)
    except ValueError as exc:
        raise ConfigError(f"teacher: {exc}") from None

    sdg_raw = _take(
        top["sdg"] or {},
        {
            "nex": 5,
            "calls_per_chunk": 1,
            "question_seed": 17,
            "pair_seed": 29,
            "question_decode": None,
            "answer_decode": None,
            "pair_decode": None,
            "filter_decode": None,
        },
        "sdg",
    )
    defaults = SdgSection()
    sdg = SdgSection(
        nex=int(sdg_raw["nex"]),
        calls_per_chunk=int(sdg_raw["calls_per_chunk"]),
        question_seed=int(sdg_raw["question_seed"]),
        pair_seed=int(sdg_raw["pair_seed"]),
        question_decode=_decode_params(
            sdg_raw["question_decode"], "sdg.question_decode", defaults.question_decode
        ),
        answer_decode=_decode_params(
            sdg_raw["answer_decode"], "sdg.answer_decode", defaults.answer_decode
        ),
        pair_decode=_decode_params(sdg_raw["pair_decode"], "sdg.pair_decode", defaults.pair_decode),
        filter_decode=_decode_params(
            sdg_raw["filter_decode"], "sdg.filter_decode", defaults.filter_decode
        ),
    )

    split_raw = _take(
        top["split"],
        {"seed": None, "train_frac": 0.8, "val_frac": 0.1, "test_frac": 0.1, "group_by_chunk": True},
        "split",
    )
    if split_raw["seed"] is None:
        raise ConfigError("split.seed is required for reproducible splits")
    try:
        split = SplitSpec(
            seed=int(split_raw["seed"]),
            train_frac=float(split_raw["train_frac"]),
            val_frac=float(split_raw["val_frac"]),
            test_frac=float(split_raw["test_frac"]),
            group_by_chunk=bool(split_raw["group_by_chunk"]),
        )
    except ValueError as exc:
        raise ConfigError(f"split: {exc}") from None

    rag_raw = _take(top["rag"] or {}, {"mode": "lexical", "k": 1}, "rag")
    rag = RagSection(mode=rag_raw["mode"], k=int(rag_raw["k"]))

    eval_raw = _take(
        top["eval"] or {},
        {"references": None, "methods": {}, "embedding_f1": True, "judge": None},
        "eval",
    )
    judge = None
    if eval_raw["judge"] is not None:
        judge_raw = _take(
            eval_raw["judge"],
            {
                "base_url": None,
                "model_id": None,
                "api_key_env": "JUDGE_API_KEY",
                "rubric": None,
                "resamples": 1000,
                "ci_level": 0.95,
                "bootstrap_seed": 13,
                "max_concurrency": 4,
                "timeout_s": 60.0,
            },
            "eval.judge",
        )
        _require(judge_raw, ["base_url", "model_id"], "eval.judge")
        judge = JudgeSection(
            base_url=judge_raw["base_url"],
            model_id=judge_raw["model_id"],
            api_key_env=judge_raw["api_key_env"],
            rubric=judge_raw["rubric"],
            resamples=int(judge_raw["resamples"]),
            ci_level=float(judge_raw["ci_level"]),
            bootstrap_seed=int(judge_raw["bootstrap_seed"]),
            max_concurrency=int(judge_raw["max_concurrency"]),
            timeout_s=float(judge_raw["timeout_s"]),
        )
    methods = eval_raw["methods"] or {}
    if not isinstance(methods, dict) or any(not isinstance(v, str) for v in methods.values()):
        raise ConfigError("eval.methods must map method names to response file paths")
    eval_section = EvalSection(
        references=str(base / eval_raw["references"]) if eval_raw["references"] else None,
        methods={name: str(base / path) for name, path in methods.items()},
        embedding_f1=bool(eval_raw["embedding_f1"]),
        judge=judge,
    )

    verify_raw = _take(
        top["verify"] or {},
        {"pref_scores": None, "sft_scores": None, "beta": 0.1, "grad_eps": 1e-5},
        "verify",
    )
    verify = VerifySection(
        pref_scores=str(base / verify_raw["pref_scores"]) if verify_raw["pref_scores"] else None,
        sft_scores=str(base / verify_raw["sft_scores"]) if verify_raw["sft_scores"] else None,
        beta=float(verify_raw["beta"]),
        grad_eps=float(verify_raw["grad_eps"]),
    )

    use_case = top["use_case"] or str(top["run_id"])
    config = PipelineConfig(
        run_id=str(top["run_id"]),
        out_dir=str(base / top["out_dir"]),
        keyword=str(top["keyword"]),
        use_case=use_case,
        documents=tuple(documents),
        chunk=chunk,
        teacher=teacher,
        sdg=sdg,
        split=split,
        rag=rag,
        eval=eval_section,
        verify=verify,
        templates_dir=str(base / top["templates_dir"]) if top["templates_dir"] else None,
        config_hash=_hash_raw(raw),
    )
    if not config.keyword.strip():
        raise ConfigError("keyword must be non-empty")
    return config


def _hash_raw(raw: dict) -> str:
    canonical = json.dumps(raw, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(path: str | Path) -> PipelineConfig:
    """Parse and validate a config file (YAML or JSON)."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping at the top level")
    return validate_config(raw, base_dir=path.parent)
