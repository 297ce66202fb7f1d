"""Run directory bookkeeping: manifest, artifact hashes, lock, orphans.

Every pipeline command appends to one manifest.json per run directory, so
each downstream stage can verify the exact bytes it consumes and the
orphan check can prove nothing on disk is unaccounted for.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .. import __version__
from ..errors import DependencyError, FormatError, LockHeldError
from ..utils import sha256_file

MANIFEST_NAME = "manifest.json"
LOCK_NAME = ".lock"


@dataclass
class RunManifest:
    run_id: str
    tool_version: str = __version__
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    seeds: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)   # name -> {path, sha256}
    stage_hashes: dict = field(default_factory=dict)  # e.g. stage1_decoder
    timings: dict = field(default_factory=dict)     # stage -> seconds
    completed: list = field(default_factory=list)   # stage names, in order

    def mark_completed(self, stage: str) -> None:
        if stage not in self.completed:
            self.completed.append(stage)

    def has_stage(self, stage: str) -> bool:
        return stage in self.completed


def manifest_path(run_dir: str | Path) -> Path:
    return Path(run_dir) / MANIFEST_NAME


def save_manifest(run_dir: str | Path, manifest: RunManifest) -> None:
    path = manifest_path(run_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(asdict(manifest), sort_keys=True, indent=2) + "\n")
    tmp.replace(path)


def load_manifest(run_dir: str | Path) -> RunManifest:
    path = manifest_path(run_dir)
    if not path.exists():
        raise DependencyError(
            f"{path}: no manifest found; run `shapedis make-data` for this run id first"
        )
    try:
        blob = json.loads(path.read_text())
        return RunManifest(**blob)
    except (json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from exc


def record_artifact(
    manifest: RunManifest, run_dir: str | Path, name: str, path: str | Path
) -> None:
    """Hash a file and register it under a stable logical name."""
    run_dir = Path(run_dir)
    path = Path(path)
    rel = path.relative_to(run_dir)
    manifest.artifacts[name] = {"path": str(rel), "sha256": sha256_file(path)}


def verify_artifact(manifest: RunManifest, run_dir: str | Path, name: str) -> Path:
    """Resolve a logical artifact name, checking existence and content hash."""
    entry = manifest.artifacts.get(name)
    if entry is None:
        stage_hint = name.split("/")[0]
        raise DependencyError(
            f"artifact {name!r} is not in the manifest; run the stage that "
            f"produces it (hint: `{stage_hint}`) before this command"
        )
    path = Path(run_dir) / entry["path"]
    if not path.exists():
        raise DependencyError(
            f"artifact {name!r} is registered but {path} is missing; "
            f"re-run the producing stage to regenerate it"
        )
    actual = sha256_file(path)
    if actual != entry["sha256"]:
        raise DependencyError(
            f"artifact {name!r} at {path} does not match its recorded hash "
            f"(expected {entry['sha256'][:12]}..., found {actual[:12]}...); "
            f"the upstream stage must be re-run before continuing"
        )
    return path


def require_stage(manifest: RunManifest, stage: str, command_hint: str) -> None:
    if not manifest.has_stage(stage):
        raise DependencyError(
            f"stage {stage!r} has not completed for run {manifest.run_id!r}; "
            f"run `shapedis {command_hint}` first"
        )


def find_orphans(run_dir: str | Path) -> list[str]:
    """Files in the run directory no manifest entry accounts for."""
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    known = {entry["path"] for entry in manifest.artifacts.values()}
    known.add(MANIFEST_NAME)
    known.add(LOCK_NAME)
    orphans = []
    for path in sorted(run_dir.rglob("*")):
        if path.is_dir():
            continue
        rel = str(path.relative_to(run_dir))
        if rel not in known and not rel.endswith(".tmp"):
            orphans.append(rel)
    return orphans


class RunLock:
    """O_EXCL lock file: one writing process per run directory at a time."""

    def __init__(self, run_dir: str | Path):
        self.path = Path(run_dir) / LOCK_NAME
        self._held = False

    def __enter__(self) -> "RunLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockHeldError(
                f"{self.path}: run directory is locked by another process "
                f"(pid {self.path.read_text().strip() or 'unknown'}); "
                f"remove the lock file if that process is gone"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self._held = True
        return self

    def __exit__(self, *exc) -> None:
        if self._held:
            self.path.unlink(missing_ok=True)
            self._held = False
