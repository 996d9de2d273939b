"""Indirect question-quality metrics and the statistics used to compare them.

Entropy is measured in nats over the renormalized top-k distribution; the
information-gain metric conditions on only the first answer token. Rank
correlation uses average ranks for ties with a two-sided t-approximation
for the p-value.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from typing import Sequence

from scipy.special import stdtr

from .domain import BLOOM_ORDER, Bloom, Exam
from .errors import (
    InvalidDistributionError,
    InvalidInputError,
    MetricError,
    MetricUnavailableError,
    StatError,
    StudySimError,
)
from .gateway import Gateway, TokenDistribution, user_request
from .gateway.core import RETRY_SEED_STRIDE
from .prompts import (
    render_entropy_posterior_prompt,
    render_entropy_prior_prompt,
    render_salience_prompt,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SalienceScore:
    value: int

    def __post_init__(self):
        if self.value not in (1, 2, 3, 4, 5):
            raise MetricError(f"salience must be an integer in [1, 5], got {self.value!r}")


@dataclass(frozen=True)
class EIGResult:
    prior_entropy: float
    posterior_entropy: float
    eig: float

    @classmethod
    def from_entropies(cls, prior: float, posterior: float) -> "EIGResult":
        return cls(prior_entropy=prior, posterior_entropy=posterior, eig=prior - posterior)


@dataclass(frozen=True)
class CorrelationResult:
    rho: float
    p_value: float
    n: int


@dataclass(frozen=True)
class SimilarityResult:
    max_cosine: float | None
    max_rouge_l: float


# -- entropy and information gain ---------------------------------------------


def entropy(dist: TokenDistribution) -> float:
    """Shannon entropy in nats of the renormalized distribution.

    Top-k truncation loses tail mass, so probabilities are divided by their
    sum before summing -p*ln(p).
    """
    total = sum(dist.probs)
    if not dist.probs or total <= 0.0:
        raise InvalidDistributionError("distribution has no probability mass")
    value = 0.0
    for p in dist.probs:
        q = p / total
        if q > 0.0:
            value -= q * math.log(q)
    return max(0.0, value)


def eig(
    question: str,
    article: str,
    answer_first_token: str,
    gateway: Gateway,
    model_id: str,
    *,
    seed: int = 0,
    top_k_logprobs: int = 20,
) -> EIGResult:
    """Entropy drop of the first answer token after seeing the true first token."""

    def first_token_entropy(prompt: str) -> float:
        request = user_request(
            model_id,
            prompt,
            temperature=0.0,
            seed=seed,
            max_tokens=1,
            want_logprobs=True,
            top_k_logprobs=top_k_logprobs,
        )
        result = gateway.complete(request)
        if result.first_token_distribution is None:
            raise MetricUnavailableError("backend returned no token distribution")
        return entropy(result.first_token_distribution)

    prior = first_token_entropy(render_entropy_prior_prompt(article, question))
    posterior = first_token_entropy(
        render_entropy_posterior_prompt(article, question, answer_first_token)
    )
    return EIGResult.from_entropies(prior, posterior)


def first_token(text: str) -> str:
    """Leading whitespace-delimited token of an answer, used for conditioning."""
    stripped = text.strip()
    if not stripped:
        raise InvalidInputError("cannot take the first token of empty text")
    return stripped.split()[0]


# -- salience -------------------------------------------------------------------

_INT_RE = re.compile(r"-?\d+")


def salience(
    question: str,
    context: str,
    gateway: Gateway,
    model_id: str,
    *,
    seed: int = 0,
    retries: int = 3,
) -> SalienceScore:
    """Likert 1-5 relevance judgment of a question against the text read so far."""
    prompt = render_salience_prompt(context, question)
    request = user_request(model_id, prompt, temperature=0.0, seed=seed, max_tokens=16)
    last = "no reply"
    for attempt in range(retries):
        attempt_request = (
            request if attempt == 0 else request.with_seed(seed + RETRY_SEED_STRIDE * attempt)
        )
        text = gateway.complete(attempt_request).text
        match = _INT_RE.search(text)
        if match:
            value = int(match.group(0))
            if 1 <= value <= 5:
                return SalienceScore(value=value)
        last = text
    raise MetricError(f"no integer in [1, 5] after {retries} attempts; last reply: {last!r}")


# -- rank correlation -------------------------------------------------------------


def average_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks; tied values share the mean of their rank range."""
    n = len(values)
    order = sorted(range(n), key=lambda i: values[i])
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        shared = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = shared
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    """Rank correlation with average ranks for ties.

    The p-value comes from the two-sided t-approximation with n-2 degrees
    of freedom; |rho| = 1 pins it to zero.
    """
    if len(x) != len(y):
        raise StatError(f"length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 3:
        raise StatError(f"need at least 3 observations, got {n}")
    rx = average_ranks(x)
    ry = average_ranks(y)
    mean_x = sum(rx) / n
    mean_y = sum(ry) / n
    cov = sum((a - mean_x) * (b - mean_y) for a, b in zip(rx, ry))
    var_x = sum((a - mean_x) ** 2 for a in rx)
    var_y = sum((b - mean_y) ** 2 for b in ry)
    if var_x == 0.0 or var_y == 0.0:
        raise StatError("constant input has no defined rank correlation")
    rho = cov / math.sqrt(var_x * var_y)
    rho = min(1.0, max(-1.0, rho))
    if abs(rho) >= 1.0:
        p_value = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        p_value = 2.0 * float(stdtr(n - 2, -abs(t)))
        p_value = min(1.0, max(0.0, p_value))
    return CorrelationResult(rho=rho, p_value=p_value, n=n)


# -- lexical and semantic overlap ---------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token_a in a:
        current = [0] * (len(b) + 1)
        for j, token_b in enumerate(b, start=1):
            if token_a == token_b:
                current[j] = previous[j - 1] + 1
            else:
                current[j] = max(previous[j], current[j - 1])
        previous = current
    return previous[len(b)]


def rouge_l_f1(candidate: str, reference: str) -> float:
    """LCS-based F1 over lowercased alphanumeric tokens.

    Identical token sequences score 1 (including the empty-empty case); a
    candidate or reference with no tokens otherwise scores 0.
    """
    a = tokenize(candidate)
    b = tokenize(reference)
    if a == b:
        return 1.0
    if not a or not b:
        return 0.0
    lcs = _lcs_length(a, b)
    if lcs == 0:
        return 0.0
    precision = lcs / len(a)
    recall = lcs / len(b)
    return 2.0 * precision * recall / (precision + recall)


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    if len(u) != len(v):
        raise InvalidInputError("vectors must have equal dimension")
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return dot / (nu * nv)


def similarity_to_exam(
    question: str,
    exam: Exam,
    gateway: Gateway | None = None,
    embedding_model_id: str = "",
) -> SimilarityResult:
    """Max cosine and max ROUGE-L of a question against every exam question.

    The cosine side degrades to None when embeddings are unavailable; the
    lexical side always computes.
    """
    if not exam.questions:
        raise InvalidInputError("exam is empty")
    max_rouge = max(rouge_l_f1(question, q.text) for q in exam.questions)
    max_cos: float | None = None
    if gateway is not None:
        try:
            qvec = gateway.embed(question, embedding_model_id)
            max_cos = max(
                cosine(qvec, gateway.embed(q.text, embedding_model_id))
                for q in exam.questions
            )
        except StudySimError as exc:
            logger.warning("embedding similarity unavailable: %s", exc)
            max_cos = None
    return SimilarityResult(max_cosine=max_cos, max_rouge_l=max_rouge)


# -- cognitive depth -----------------------------------------------------------------


def bloom_depth(category: Bloom) -> int:
    """Map the six cognitive levels onto a 1..6 depth scale."""
    return BLOOM_ORDER.index(category) + 1
