"""OpenAI-compatible HTTP backend for chat completions and embeddings."""

from __future__ import annotations

import math
from typing import Any

import httpx

from ..errors import FatalError, RetryableError
from .types import CompletionResult, LMRequest, TokenDistribution


class OpenAIBackend:
    """Thin client for any endpoint speaking the /chat/completions schema."""

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        embedding_model: str = "text-embedding-3-small",
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.embedding_model = embedding_model
        self._client = client or httpx.Client(timeout=timeout)

    def identity(self) -> str:
        return f"http:{self.base_url}"

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        try:
            response = self._client.post(
                f"{self.base_url}{path}", json=payload, headers=self._headers()
            )
        except httpx.HTTPError as exc:
            raise RetryableError(f"transport failure on {path}: {exc}") from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise RetryableError(f"{path} returned {response.status_code}")
        if response.status_code >= 400:
            raise FatalError(f"{path} returned {response.status_code}: {response.text[:500]}")
        try:
            return response.json()
        except ValueError as exc:
            raise RetryableError(f"{path} returned non-JSON body") from exc

    def complete(self, request: LMRequest) -> CompletionResult:
        payload: dict[str, Any] = {
            "model": request.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "seed": request.seed,
            "max_tokens": request.max_tokens,
        }
        if request.want_logprobs:
            payload["logprobs"] = True
            payload["top_logprobs"] = request.top_k_logprobs
        data = self._post("/chat/completions", payload)
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise RetryableError(f"malformed completion payload: {exc}") from exc
        distribution = None
        if request.want_logprobs:
            distribution = self._first_token_distribution(choice)
        return CompletionResult(text=text, first_token_distribution=distribution)

    @staticmethod
    def _first_token_distribution(choice: dict[str, Any]) -> TokenDistribution | None:
        content = (choice.get("logprobs") or {}).get("content") or []
        if not content:
            return None
        top = content[0].get("top_logprobs") or []
        if not top:
            return None
        labels = tuple(str(entry["token"]) for entry in top)
        probs = tuple(min(math.exp(float(entry["logprob"])), 1.0) for entry in top)
        total = sum(probs)
        if total > 1.0:  # numeric slack from exp(); rescale into the invariant
            probs = tuple(p / total for p in probs)
        return TokenDistribution(token_labels=labels, probs=probs)

    def embed(self, text: str, model_id: str = "") -> tuple[float, ...]:
        payload = {"model": model_id or self.embedding_model, "input": text}
        data = self._post("/embeddings", payload)
        try:
            return tuple(float(v) for v in data["data"][0]["embedding"])
        except (KeyError, IndexError, TypeError) as exc:
            raise RetryableError(f"malformed embedding payload: {exc}") from exc
