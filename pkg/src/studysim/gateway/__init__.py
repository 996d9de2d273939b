"""Uniform access to chat completion, token log-probabilities, and embeddings.

Backends are pluggable: any OpenAI-compatible HTTP endpoint, or a
deterministic scripted mock. All responses flow through a persistent cache
keyed on the full request.
"""

from .core import Gateway, RetryPolicy, TokenBucket, extract_json, request_json
from .cache import ResponseCache
from .http import OpenAIBackend
from .mock import MockBackend, MockRule, MockScript
from .types import CompletionResult, LMRequest, Message, TokenDistribution, user_request

__all__ = [
    "CompletionResult",
    "Gateway",
    "LMRequest",
    "Message",
    "MockBackend",
    "MockRule",
    "MockScript",
    "OpenAIBackend",
    "ResponseCache",
    "RetryPolicy",
    "TokenBucket",
    "TokenDistribution",
    "extract_json",
    "request_json",
    "user_request",
]
