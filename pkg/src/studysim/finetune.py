"""Rejection-sampling filter over utility records and fine-tune file emission.

The training target is the question alone; answers are produced after the
fact by a separate generator and are not part of the question generator's
job, so they never appear in assistant messages.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import httpx

from .domain import UtilityRecord
from .errors import ConfigError, EmptyDatasetError, FatalError
from .generation import GenerationRecord

logger = logging.getLogger(__name__)

DEFAULT_THETA = 0.1


@dataclass(frozen=True)
class FilterResult:
    theta: float
    accepted_ids: tuple[str, ...]
    accepted_count: int
    rejected_count: int


def filter_by_utility(records: Sequence[UtilityRecord], theta: float) -> FilterResult:
    """Keep records with utility >= theta; the boundary is inclusive."""
    if not math.isfinite(theta):
        raise ConfigError(f"theta must be finite, got {theta!r}")
    accepted = tuple(r.qa_id for r in records if r.utility >= theta)
    result = FilterResult(
        theta=theta,
        accepted_ids=accepted,
        accepted_count=len(accepted),
        rejected_count=len(records) - len(accepted),
    )
    logger.info(
        "theta=%s accepted %d / rejected %d",
        theta,
        result.accepted_count,
        result.rejected_count,
    )
    return result


def build_finetune_examples(
    generation_records: Iterable[GenerationRecord],
    accepted_ids: Iterable[str],
) -> list[dict[str, Any]]:
    """Chat-format training examples for the accepted pairs.

    The user message is byte-identical to the prompt that generated the
    question; ordering is (chapter ordinal, section index, qa id) so the
    emitted file is deterministic.
    """
    accepted = set(accepted_ids)
    chosen = [r for r in generation_records if r.qa.id in accepted]
    chosen.sort(key=lambda r: (r.chapter_ordinal, r.qa.anchor_section, r.qa.id))
    return [
        {
            "messages": [
                {"role": "system", "content": r.system_prompt},
                {"role": "user", "content": r.user_prompt},
                {"role": "assistant", "content": r.qa.question},
            ]
        }
        for r in chosen
    ]


def emit_finetune_jsonl(examples: Sequence[Mapping[str, Any]], path: Path | str) -> Path:
    """Write one JSON object per line; refuses to create an empty dataset."""
    if not examples:
        raise EmptyDatasetError("no accepted examples to emit")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for example in examples:
            fh.write(json.dumps(example, ensure_ascii=False) + "\n")
    return path


def submit_finetune(
    file_path: Path | str,
    base_model: str,
    base_url: str | None,
    api_key: str | None,
    client: httpx.Client | None = None,
) -> str:
    """Upload the dataset and create a fine-tuning job; returns the job id.

    Does not wait for the job to finish.
    """
    if not base_url or not api_key:
        raise ConfigError("fine-tune submission needs an endpoint URL and API key")
    file_path = Path(file_path)
    owns_client = client is None
    client = client or httpx.Client(timeout=120.0)
    headers = {"Authorization": f"Bearer {api_key}"}
    try:
        with open(file_path, "rb") as fh:
            upload = client.post(
                f"{base_url.rstrip('/')}/files",
                headers=headers,
                data={"purpose": "fine-tune"},
                files={"file": (file_path.name, fh, "application/jsonl")},
            )
        if upload.status_code >= 400:
            raise FatalError(f"file upload failed ({upload.status_code}): {upload.text[:500]}")
        file_id = upload.json()["id"]
        job = client.post(
            f"{base_url.rstrip('/')}/fine_tuning/jobs",
            headers={**headers, "Content-Type": "application/json"},
            json={"training_file": file_id, "model": base_model},
        )
        if job.status_code >= 400:
            raise FatalError(f"job creation failed ({job.status_code}): {job.text[:500]}")
        return job.json()["id"]
    except httpx.HTTPError as exc:
        raise FatalError(f"fine-tune submission transport failure: {exc}") from exc
    finally:
        if owns_client:
            client.close()
