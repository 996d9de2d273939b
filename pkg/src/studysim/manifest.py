"""Run directories, deterministic manifests, and stage dependency checks.

The manifest holds only reproducible facts (config snapshot, backend
identity, seed, artifact hashes, request counts); wall-clock timings and
backend-hit counters live in a sidecar accounting file so that two runs
from the same inputs produce byte-identical manifests even when the second
run is served entirely from cache.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import DependencyError
from .util import file_sha256, sha256_hex

MANIFEST_NAME = "manifest.json"
ACCOUNTING_NAME = "accounting.json"


def tree_sha256(path: Path) -> str:
    """Stable digest of a file or directory tree (relative paths + file hashes)."""
    if path.is_file():
        return file_sha256(path)
    entries = []
    for child in sorted(path.rglob("*")):
        if child.is_file():
            entries.append(f"{child.relative_to(path).as_posix()}:{file_sha256(child)}")
    return sha256_hex("\n".join(entries))


@dataclass
class RunManifest:
    run_id: str
    command: str
    config: dict[str, Any]
    backend: str
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    request_count: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "command": self.command,
            "config": self.config,
            "backend": self.backend,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "request_count": self.request_count,
        }


def derive_run_id(command: str, config: Mapping[str, Any], backend: str, seed: int,
                  inputs: Mapping[str, str]) -> str:
    payload = json.dumps(
        {
            "command": command,
            "config": dict(config),
            "backend": backend,
            "seed": seed,
            "inputs": dict(inputs),
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return sha256_hex(payload)[:12]


def allocate_run_dir(runs_root: Path, command: str, run_id: str) -> Path:
    """New directory per invocation; collisions get a numeric suffix so
    prior runs stay immutable."""
    base = runs_root / f"{command}-{run_id}"
    candidate = base
    counter = 2
    while candidate.exists():
        candidate = Path(f"{base}-{counter}")
        counter += 1
    candidate.mkdir(parents=True)
    return candidate


def write_manifest(run_dir: Path, manifest: RunManifest) -> Path:
    path = run_dir / MANIFEST_NAME
    path.write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    return path


def write_accounting(run_dir: Path, **fields: Any) -> Path:
    path = run_dir / ACCOUNTING_NAME
    payload = {"written_at": time.time(), **fields}
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path


def load_manifest(run_dir: Path) -> dict[str, Any]:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.is_file():
        raise DependencyError("unknown", f"{run_dir} has no {MANIFEST_NAME}")
    return json.loads(path.read_text(encoding="utf-8"))


def require_artifact(run_dir: Path | str, name: str, stage: str) -> Path:
    """Resolve a named output of an upstream run, verifying its hash.

    Raises :class:`DependencyError` naming the producing stage when the
    artifact is missing or no longer matches its recorded digest.
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DependencyError(stage, f"{run_dir} is not a completed run (no {MANIFEST_NAME})")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    outputs = manifest.get("outputs", {})
    if name not in outputs:
        raise DependencyError(stage, f"{run_dir} does not record artifact {name!r}")
    path = run_dir / name
    if not path.exists():
        raise DependencyError(stage, f"artifact {name!r} missing from {run_dir}")
    actual = tree_sha256(path)
    if actual != outputs[name]:
        raise DependencyError(stage, f"artifact {name!r} in {run_dir} is stale or modified")
    return path
