"""Request and response value types for the LM gateway."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

from ..errors import InvalidInputError
from ..util import canonical_json, sha256_hex

VALID_ROLES = ("system", "user", "assistant")
TOP_K_CEILING = 20  # common API ceiling for per-token top-k log-probabilities


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in VALID_ROLES:
            raise InvalidInputError(f"unknown message role {self.role!r}")


@dataclass(frozen=True)
class LMRequest:
    model_id: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    seed: int = 0
    max_tokens: int = 1024
    want_logprobs: bool = False
    top_k_logprobs: int = 5

    def __post_init__(self):
        if not self.messages:
            raise InvalidInputError("request needs at least one message")
        if self.messages[0].role not in ("system", "user"):
            raise InvalidInputError("first message must be system or user")
        if self.temperature < 0:
            raise InvalidInputError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise InvalidInputError("max_tokens must be positive")
        if not 1 <= self.top_k_logprobs <= TOP_K_CEILING:
            raise InvalidInputError(
                f"top_k_logprobs must be in [1, {TOP_K_CEILING}]"
            )

    def prompt_text(self) -> str:
        """Flattened message contents; the surface mock matchers see."""
        return "\n".join(m.content for m in self.messages)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in self.messages],
            "temperature": self.temperature,
            "seed": self.seed,
            "max_tokens": self.max_tokens,
            "want_logprobs": self.want_logprobs,
            "top_k_logprobs": self.top_k_logprobs,
        }

    def cache_key(self) -> str:
        return sha256_hex(canonical_json(self.to_dict()))

    def with_seed(self, seed: int) -> "LMRequest":
        from dataclasses import replace

        return replace(self, seed=seed)


def user_request(
    model_id: str,
    content: str,
    *,
    system: str | None = None,
    temperature: float = 0.0,
    seed: int = 0,
    max_tokens: int = 1024,
    want_logprobs: bool = False,
    top_k_logprobs: int = 5,
) -> LMRequest:
    messages: list[Message] = []
    if system is not None:
        messages.append(Message("system", system))
    messages.append(Message("user", content))
    return LMRequest(
        model_id=model_id,
        messages=tuple(messages),
        temperature=temperature,
        seed=seed,
        max_tokens=max_tokens,
        want_logprobs=want_logprobs,
        top_k_logprobs=top_k_logprobs,
    )


@dataclass(frozen=True)
class TokenDistribution:
    """Top-k probabilities over one token position.

    Truncation means the tail mass is missing, so the sum may fall short of
    one; consumers renormalize before entropy.
    """

    token_labels: tuple[str, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.token_labels) != len(self.probs):
            raise InvalidInputError("labels and probs must have equal length")
        for p in self.probs:
            if not 0.0 < p <= 1.0:
                raise InvalidInputError(f"probability out of (0, 1]: {p!r}")
        if sum(self.probs) > 1.0 + 1e-9:
            raise InvalidInputError("probabilities sum above 1")

    def to_dict(self) -> dict[str, Any]:
        return {"token_labels": list(self.token_labels), "probs": list(self.probs)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TokenDistribution":
        return cls(token_labels=tuple(data["token_labels"]), probs=tuple(data["probs"]))


@dataclass(frozen=True)
class CompletionResult:
    text: str
    first_token_distribution: TokenDistribution | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "first_token_distribution": self.first_token_distribution.to_dict()
            if self.first_token_distribution
            else None,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CompletionResult":
        dist = data.get("first_token_distribution")
        return cls(
            text=data["text"],
            first_token_distribution=TokenDistribution.from_dict(dist) if dist else None,
        )
