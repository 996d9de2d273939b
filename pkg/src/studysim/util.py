"""Hashing, canonical JSON, and seed-derivation helpers."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any


def canonical_json(value: Any) -> str:
    """Serialize with sorted keys and compact separators.

    This is the single canonical form used for cache keys and content
    hashes, so a stray formatting change cannot silently invalidate caches.
    """
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def stable_hash(*parts: Any) -> str:
    """Full-width hex digest of a tuple of JSON-serializable parts."""
    return sha256_hex(canonical_json(list(parts)))


def short_hash(*parts: Any) -> str:
    return stable_hash(*parts)[:16]


def derive_seed(*parts: Any) -> int:
    """Fold arbitrary parts into a small non-negative integer seed.

    Used to give every (chapter, section, trial, role) combination its own
    reproducible seed stream without coordinating counters across threads.
    """
    digest = hashlib.sha256(canonical_json(list(parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()
