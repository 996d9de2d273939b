"""Persistent response cache: global content-addressed store plus a per-run log.

Reads prefer the global store so later runs reuse earlier work; writes go to
both. The run log is append-only JSONL for auditability and crash safety.
"""

from __future__ import annotations

import json
import threading
import time
from pathlib import Path
from typing import Any

from ..errors import CacheError


class ResponseCache:
    def __init__(self, global_dir: Path | None = None, run_log_path: Path | None = None):
        self.global_dir = Path(global_dir) if global_dir else None
        self.run_log_path = Path(run_log_path) if run_log_path else None
        self._memory: dict[str, dict[str, Any]] = {}
        self._logged_keys: set[str] = set()
        self._lock = threading.Lock()
        if self.global_dir:
            self.global_dir.mkdir(parents=True, exist_ok=True)
        if self.run_log_path:
            self.run_log_path.parent.mkdir(parents=True, exist_ok=True)

    def _global_path(self, key: str) -> Path:
        assert self.global_dir is not None
        return self.global_dir / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict[str, Any] | None:
        with self._lock:
            if key in self._memory:
                return self._memory[key]
        if self.global_dir:
            path = self._global_path(key)
            if path.exists():
                try:
                    record = json.loads(path.read_text(encoding="utf-8"))
                except (json.JSONDecodeError, OSError) as exc:
                    raise CacheError(f"corrupt cache entry {path}: {exc}") from exc
                if record.get("key") != key:
                    raise CacheError(f"cache entry {path} holds wrong key")
                response = record["response"]
                with self._lock:
                    self._memory[key] = response
                return response
        return None

    def put(self, key: str, request: dict[str, Any], response: dict[str, Any]) -> None:
        record = {
            "key": key,
            "request": request,
            "response": response,
            "timestamp": time.time(),
        }
        with self._lock:
            already_logged = key in self._logged_keys
            self._memory[key] = response
            self._logged_keys.add(key)
            # Writes stay inside the lock: one writer at a time keeps the
            # JSONL log well-formed and the global store free of torn files.
            if self.global_dir:
                path = self._global_path(key)
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp")
                tmp.write_text(
                    json.dumps(record, ensure_ascii=False, sort_keys=True),
                    encoding="utf-8",
                )
                tmp.replace(path)
            if self.run_log_path and not already_logged:
                with open(self.run_log_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
