"""Deterministic scripted backend.

A script is an ordered rule list; the first matching rule answers the
request and a terminal default rule is mandatory. A rule either carries a
literal response or names a built-in behavior. Behaviors compute the reply
from the prompt itself, which is what makes whole-pipeline runs scriptable:
the keyword behaviors implement a learner that answers an exam question
correctly exactly when the study materials cover that question's keyword
token, so expected scores are computable by hand.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from ..errors import ConfigError, FatalError
from ..util import sha256_hex
from .types import CompletionResult, LMRequest, TokenDistribution

KEYWORD_PATTERN = r"KW[A-Z0-9]+"

EMBED_DIM = 32


def _digest_ints(text: str, count: int) -> list[int]:
    """Expand a text into `count` deterministic 32-bit integers."""
    out: list[int] = []
    counter = 0
    while len(out) < count:
        block = hashlib.sha256(f"{counter}:{text}".encode("utf-8")).digest()
        for i in range(0, len(block) - 3, 4):
            out.append(int.from_bytes(block[i : i + 4], "big"))
            if len(out) == count:
                break
        counter += 1
    return out


def hash_embedding(text: str, dim: int = EMBED_DIM) -> tuple[float, ...]:
    """Deterministic unit vector derived from the text content."""
    raw = [(v / 2**31) - 1.0 for v in _digest_ints("embed:" + text, dim)]
    norm = math.sqrt(sum(v * v for v in raw)) or 1.0
    return tuple(v / norm for v in raw)


def hash_distribution(text: str, k: int = 4) -> TokenDistribution:
    weights = [v + 1 for v in _digest_ints("dist:" + text, k)]
    total = sum(weights)
    probs = [w / total for w in weights]
    # Guard the (0, 1] invariant against pathological rounding.
    probs = [min(max(p, 1e-9), 1.0) for p in probs]
    scale = sum(probs)
    probs = [p / scale for p in probs]
    return TokenDistribution(
        token_labels=tuple(f"tok{i}" for i in range(k)), probs=tuple(probs)
    )


# -- built-in behaviors ------------------------------------------------------

BehaviorFn = Callable[[str, LMRequest, dict[str, Any]], "MockReply"]


@dataclass(frozen=True)
class MockReply:
    text: str
    logprobs: TokenDistribution | None = None


def _block(text: str, start_marker: str, end_marker: str) -> str:
    start = text.find(start_marker)
    if start < 0:
        return ""
    start += len(start_marker)
    end = text.find(end_marker, start)
    return text[start:] if end < 0 else text[start:end]


def _keywords(text: str, pattern: str) -> list[str]:
    return re.findall(pattern, text)


def _behavior_keyword_learner(prompt: str, request: LMRequest, params: dict) -> MockReply:
    from .. import prompts

    pattern = params.get("pattern", KEYWORD_PATTERN)
    known = set(params.get("known_keywords", ()))
    # The tag on its own line marks the real block; instructions mention the
    # tags inline.
    materials = _block(
        prompt,
        f"\n{prompts.LEARNING_MATERIALS_OPEN}\n",
        f"\n{prompts.LEARNING_MATERIALS_CLOSE}",
    )
    exam = _block(prompt, f"\n{prompts.EXAM_OPEN}\n", f"\n{prompts.EXAM_CLOSE}")
    covered = set(_keywords(materials, pattern)) | known
    answers: dict[str, str] = {}
    for match in re.finditer(r"^(\d+)\.\s+(.*)$", exam, re.MULTILINE):
        number, text = match.group(1), match.group(2)
        needed = set(_keywords(text, pattern))
        if needed and needed <= covered:
            answers[number] = f"STUDIED: {' '.join(sorted(needed))}."
        else:
            answers[number] = prompts.REFUSAL
    return MockReply(text=json.dumps(answers, ensure_ascii=False))


def _behavior_keyword_evaluator(prompt: str, request: LMRequest, params: dict) -> MockReply:
    prediction = _block(prompt, "student's answer:\n", "\n\nPlease provide")
    score = 1.0 if "STUDIED:" in prediction else 0.0
    return MockReply(text=json.dumps({"score": score, "feedback": "keyword check"}))


def _behavior_sections_from_paragraphs(
    prompt: str, request: LMRequest, params: dict
) -> MockReply:
    skip_prefixes = tuple(
        p.lower()
        for p in params.get(
            "skip_prefixes", ("learning objectives", "key concepts", "summary")
        )
    )
    target = prompt.split("# TARGET TEXTBOOK CONTENT:\n", 1)
    body = target[1] if len(target) == 2 else ""
    sections: dict[str, dict[str, str]] = {}
    index = 1
    for paragraph in re.split(r"\n\s*\n", body):
        paragraph = paragraph.strip()
        if not paragraph:
            continue
        first_line = paragraph.splitlines()[0].strip().lower()
        if any(first_line.startswith(p) for p in skip_prefixes):
            continue
        sections[str(index)] = {"content": paragraph}
        index += 1
    return MockReply(text=json.dumps({"section": sections}, ensure_ascii=False))


def _behavior_bloom_from_hash(prompt: str, request: LMRequest, params: dict) -> MockReply:
    from ..domain import Bloom

    categories = params.get("categories") or [b.value for b in Bloom]
    entries = []
    for match in re.finditer(r"^Question \d+: (.*)$", prompt, re.MULTILINE):
        text = match.group(1)
        pick = categories[int(sha256_hex(text), 16) % len(categories)]
        entries.append({"question": text, "bloom_category": pick})
    return MockReply(text=json.dumps({"bloom_categories": entries}, ensure_ascii=False))


def _numbered_block_items(block: str) -> list[tuple[int, str]]:
    """Parse '[i] text' items, folding continuation lines into the item."""
    items: list[tuple[int, str]] = []
    current: list[str] | None = None
    number = 0
    for line in block.splitlines():
        match = re.match(r"^\[(\d+)\]\s*(.*)$", line)
        if match:
            if current is not None:
                items.append((number, "\n".join(current)))
            number = int(match.group(1))
            current = [match.group(2)]
        elif current is not None:
            current.append(line)
    if current is not None:
        items.append((number, "\n".join(current)))
    return items


def _behavior_align_by_keyword(prompt: str, request: LMRequest, params: dict) -> MockReply:
    pattern = params.get("pattern", KEYWORD_PATTERN)
    sections = _numbered_block_items(_block(prompt, "Sections:\n", "\nExam questions:"))
    questions = _numbered_block_items(
        _block(prompt, "Exam questions:\n", "\n\nFor each exam question")
    )
    alignments = []
    for qnum, qtext in questions:
        needed = set(_keywords(qtext, pattern))
        hits = [idx for idx, content in sections if needed & set(_keywords(content, pattern))]
        alignments.append({"question": qnum, "sections": sorted(hits)})
    return MockReply(text=json.dumps({"alignments": alignments}, ensure_ascii=False))


def _anchor_segment(prompt: str) -> str:
    marker = "Student is currently reading the section: "
    start = prompt.find(marker)
    if start < 0:
        return prompt
    start += len(marker)
    end = prompt.find("Generate a question that helps", start)
    if end < 0:
        end = prompt.find("generate a question that helps", start)
    return prompt[start:] if end < 0 else prompt[start:end]


def _behavior_question_from_anchor(
    prompt: str, request: LMRequest, params: dict
) -> MockReply:
    pattern = params.get("pattern", KEYWORD_PATTERN)
    if "key question that connects" in prompt:
        scope = _block(prompt, "Input context: ", "\nNext paragraph:")
    else:
        scope = _anchor_segment(prompt)
    found = _keywords(scope, pattern)
    topic = found[-1] if found else "this section"
    payload = {
        "reasoning": f"The student should focus on {topic}.",
        "question": f"What is {topic}?",
    }
    return MockReply(text=json.dumps(payload, ensure_ascii=False))


def _behavior_next_paragraph(prompt: str, request: LMRequest, params: dict) -> MockReply:
    pattern = params.get("pattern", KEYWORD_PATTERN)
    scope = _block(prompt, "understand the content better:\n\n", "\nOutput in the following")
    found = _keywords(scope, pattern)
    topic = found[-1] if found else "the topic"
    return MockReply(
        text=json.dumps({"next_paragraph": f"A closer look at {topic}."}, ensure_ascii=False)
    )


def _behavior_answers_echo(prompt: str, request: LMRequest, params: dict) -> MockReply:
    pattern = params.get("pattern", KEYWORD_PATTERN)
    match = re.search(r"questions: (\[.*?\])\n\nAnswer each question", prompt, re.DOTALL)
    questions: list[str] = json.loads(match.group(1)) if match else []
    pairs = []
    for q in questions:
        found = _keywords(q, pattern)
        answer = (
            f"{found[0]} is the concept this section introduces."
            if found
            else "A short factual answer."
        )
        pairs.append({"question": q, "answer": answer})
    return MockReply(text=json.dumps({"qa_pairs": pairs}, ensure_ascii=False))


def _behavior_salience_from_hash(prompt: str, request: LMRequest, params: dict) -> MockReply:
    question = _block(prompt, "Question: ", "\n\nSystem Instructions")
    value = 1 + int(sha256_hex("salience:" + question), 16) % 5
    return MockReply(text=str(value))


def _behavior_logprobs_from_hash(prompt: str, request: LMRequest, params: dict) -> MockReply:
    k = int(params.get("k", 4))
    return MockReply(text="answer", logprobs=hash_distribution(prompt, k))


BEHAVIORS: dict[str, BehaviorFn] = {
    "keyword_learner": _behavior_keyword_learner,
    "keyword_evaluator": _behavior_keyword_evaluator,
    "sections_from_paragraphs": _behavior_sections_from_paragraphs,
    "bloom_from_hash": _behavior_bloom_from_hash,
    "align_by_keyword": _behavior_align_by_keyword,
    "question_from_anchor": _behavior_question_from_anchor,
    "next_paragraph": _behavior_next_paragraph,
    "answers_echo": _behavior_answers_echo,
    "salience_from_hash": _behavior_salience_from_hash,
    "logprobs_from_hash": _behavior_logprobs_from_hash,
}


# -- script ------------------------------------------------------------------


@dataclass(frozen=True)
class MockRule:
    contains: str | None = None
    prompt_sha256: str | None = None
    default: bool = False
    response: str | None = None
    behavior: str | None = None
    params: dict[str, Any] = field(default_factory=dict)
    logprobs: TokenDistribution | None = None
    embedding: tuple[float, ...] | None = None

    def matches(self, prompt_text: str) -> bool:
        if self.default:
            return True
        if self.contains is not None:
            return self.contains in prompt_text
        if self.prompt_sha256 is not None:
            return sha256_hex(prompt_text) == self.prompt_sha256
        return False

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MockRule":
        match = data.get("match", {})
        logprobs = data.get("logprobs")
        return cls(
            contains=match.get("contains"),
            prompt_sha256=match.get("prompt_sha256"),
            default=bool(match.get("default", False)),
            response=data.get("response"),
            behavior=data.get("behavior"),
            params=dict(data.get("params", {})),
            logprobs=TokenDistribution(
                token_labels=tuple(logprobs["token_labels"]),
                probs=tuple(logprobs["probs"]),
            )
            if logprobs
            else None,
            embedding=tuple(data["embedding"]) if data.get("embedding") else None,
        )


@dataclass(frozen=True)
class MockScript:
    rules: tuple[MockRule, ...]

    def __post_init__(self):
        if not self.rules:
            raise ConfigError("mock script needs at least one rule")
        if not self.rules[-1].default:
            raise ConfigError("mock script must end with a terminal default rule")
        for rule in self.rules:
            if rule.behavior is not None and rule.behavior not in BEHAVIORS:
                raise ConfigError(f"unknown mock behavior {rule.behavior!r}")
            if rule.response is None and rule.behavior is None:
                raise ConfigError("mock rule needs a response or a behavior")

    def find(self, prompt_text: str) -> MockRule:
        for rule in self.rules:
            if rule.matches(prompt_text):
                return rule
        raise FatalError("unreachable: default rule must match")  # pragma: no cover

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MockScript":
        return cls(rules=tuple(MockRule.from_dict(r) for r in data.get("rules", [])))

    @classmethod
    def from_file(cls, path: Path | str) -> "MockScript":
        raw = Path(path).read_text(encoding="utf-8")
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"mock script {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


class MockBackend:
    """Backend that replays a :class:`MockScript`; counts every real call."""

    identity_prefix = "mock"

    def __init__(self, script: MockScript, script_digest: str | None = None):
        self.script = script
        self.script_digest = script_digest or sha256_hex(
            json.dumps(
                [
                    {
                        "contains": r.contains,
                        "prompt_sha256": r.prompt_sha256,
                        "default": r.default,
                        "response": r.response,
                        "behavior": r.behavior,
                    }
                    for r in script.rules
                ],
                sort_keys=True,
            )
        )
        self._lock = threading.Lock()
        self.completion_calls = 0
        self.embedding_calls = 0

    @property
    def call_count(self) -> int:
        with self._lock:
            return self.completion_calls + self.embedding_calls

    def identity(self) -> str:
        return f"mock:{self.script_digest[:12]}"

    def complete(self, request: LMRequest) -> CompletionResult:
        with self._lock:
            self.completion_calls += 1
        prompt_text = request.prompt_text()
        rule = self.script.find(prompt_text)
        if rule.behavior is not None:
            reply = BEHAVIORS[rule.behavior](prompt_text, request, rule.params)
            text, dist = reply.text, reply.logprobs
        else:
            text, dist = rule.response or "", rule.logprobs
        if request.want_logprobs and dist is None:
            dist = hash_distribution(prompt_text)
        return CompletionResult(
            text=text,
            first_token_distribution=dist if request.want_logprobs else None,
        )

    def embed(self, text: str, model_id: str = "") -> tuple[float, ...]:
        with self._lock:
            self.embedding_calls += 1
        rule = self.script.find(text)
        if rule.embedding is not None:
            return rule.embedding
        return hash_embedding(text)
