"""Run manifest: records which pipeline stages completed, with what
outputs and counts, so an interrupted run can resume where it stopped.

The manifest lives at <run_dir>/manifest.json and is rewritten
atomically after each stage. A finished stage is skipped on rerun
unless forced; a manifest whose config hash differs from the loaded
configuration refuses to continue, because artifacts in the run
directory would no longer correspond to the config file.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class ManifestError(Exception):
    pass


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    created_at: str = field(default_factory=_utc_now)
    stages: dict = field(default_factory=dict)

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunManifest":
        path = Path(run_dir) / MANIFEST_NAME
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ManifestError(f"no manifest at {path}") from None
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest at {path} is corrupt: {exc}") from None
        for key in ("run_id", "config_hash", "created_at", "stages"):
            if key not in raw:
                raise ManifestError(f"manifest at {path} is missing {key!r}")
        return cls(
            run_id=raw["run_id"],
            config_hash=raw["config_hash"],
            created_at=raw["created_at"],
            stages=raw["stages"],
        )

    @classmethod
    def load_or_create(cls, run_dir: str | Path, run_id: str, config_hash: str) -> "RunManifest":
        run_dir = Path(run_dir)
        if (run_dir / MANIFEST_NAME).exists():
            manifest = cls.load(run_dir)
            if manifest.config_hash != config_hash:
                raise ManifestError(
                    f"run directory {run_dir} was created from a different configuration "
                    f"(manifest hash {manifest.config_hash[:12]}, current {config_hash[:12]}); "
                    "use a new run_id or out_dir"
                )
            return manifest
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = cls(run_id=run_id, config_hash=config_hash)
        manifest.save(run_dir)
        return manifest

    def save(self, run_dir: str | Path) -> None:
        path = Path(run_dir) / MANIFEST_NAME
        payload = {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "created_at": self.created_at,
            "stages": self.stages,
        }
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)

    def is_done(self, stage: str) -> bool:
        entry = self.stages.get(stage)
        return bool(entry) and entry.get("status") == "done"

    def begin(self, stage: str) -> dict:
        entry = {"status": "running", "started_at": _utc_now()}
        self.stages[stage] = entry
        return entry

    def finish(
        self,
        stage: str,
        outputs: dict,
        counts: dict,
        failures: list,
        token_usage: dict,
    ) -> dict:
        entry = self.stages[stage]
        entry.update(
            status="done",
            finished_at=_utc_now(),
            outputs=outputs,
            counts=counts,
            failures=failures,
            token_usage=token_usage,
        )
        return entry

    def fail(self, stage: str, error: str) -> dict:
        entry = self.stages.setdefault(stage, {"started_at": _utc_now()})
        entry.update(status="failed", finished_at=_utc_now(), error=error)
        return entry
