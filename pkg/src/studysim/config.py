"""Run configuration: one YAML file, env-var overrides for secrets."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

API_KEY_ENV = "STUDYSIM_API_KEY"
BASE_URL_ENV = "STUDYSIM_BASE_URL"


@dataclass
class AppConfig:
    # backend: "mock:<script-path>" or "openai" (OpenAI-compatible HTTP).
    backend: str | None = None
    base_url: str = "https://api.openai.com/v1"
    api_key_env: str = API_KEY_ENV

    model_id: str = "gpt-4o-mini"
    segmentation_model_id: str | None = None  # falls back to model_id
    embedding_model_id: str = "text-embedding-3-small"

    # Judging roles (learner, evaluator, salience, Bloom, alignment) stay
    # deterministic; generation samples for trial diversity.
    judge_temperature: float = 0.0
    generation_temperature: float = 1.0
    answer_temperature: float = 0.0

    seed: int = 0
    trials: int = 3
    workers: int = 4
    theta: float = 0.1

    max_tokens: int = 1024
    top_k_logprobs: int = 20
    context_budget_chars: int = 24000

    rate_limit_per_minute: float = 60.0  # applies to HTTP backends only
    retry_max_attempts: int = 5
    retry_backoff_base: float = 0.5
    json_retries: int = 3
    few_shot_k: int = 5

    def resolve_segmentation_model(self) -> str:
        return self.segmentation_model_id or self.model_id

    def api_key(self) -> str | None:
        return os.environ.get(self.api_key_env) or os.environ.get("OPENAI_API_KEY")

    def resolved_base_url(self) -> str:
        return os.environ.get(BASE_URL_ENV) or self.base_url

    def snapshot(self) -> dict[str, Any]:
        """Manifest-safe view: no filesystem paths, no secrets.

        The backend script path is replaced by the backend identity at
        manifest time, so two runs of the same script hash identically.
        """
        data = asdict(self)
        data.pop("backend", None)
        data.pop("api_key_env", None)
        return data

    @classmethod
    def load(cls, path: Path | str | None = None, overrides: dict[str, Any] | None = None) -> "AppConfig":
        data: dict[str, Any] = {}
        if path is not None:
            raw = Path(path).read_text(encoding="utf-8")
            loaded = yaml.safe_load(raw) or {}
            if not isinstance(loaded, dict):
                raise ConfigError(f"config file {path} must hold a mapping")
            data.update(loaded)
        if overrides:
            data.update({k: v for k, v in overrides.items() if v is not None})
        known = {f for f in cls.__dataclass_fields__}  # type: ignore[attr-defined]
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


REFERENCE_CONFIG = """\
# Reference configuration; every value shown is the default.

# Backend: "mock:<script.json>" for deterministic scripted runs, or
# "openai" for any OpenAI-compatible HTTP endpoint. The API key is read
# from $STUDYSIM_API_KEY (or $OPENAI_API_KEY); the endpoint may be
# overridden with $STUDYSIM_BASE_URL.
backend: null
base_url: https://api.openai.com/v1
api_key_env: STUDYSIM_API_KEY

model_id: gpt-4o-mini
segmentation_model_id: null      # null = use model_id
embedding_model_id: text-embedding-3-small

judge_temperature: 0.0           # learner, evaluator, salience, Bloom, alignment
generation_temperature: 1.0      # question generation trials
answer_temperature: 0.0

seed: 0
trials: 3
workers: 4
theta: 0.1                       # utility acceptance threshold, inclusive

max_tokens: 1024
top_k_logprobs: 20
context_budget_chars: 24000

rate_limit_per_minute: 60        # HTTP backends only
retry_max_attempts: 5
retry_backoff_base: 0.5
json_retries: 3
few_shot_k: 5
"""
