"""Question generation strategies and the independent answer generator.

The answer prompt receives only the question texts. Answers must come from
the model's own knowledge, never from the chapter, so that study material
quality reflects the questions alone.
"""

from __future__ import annotations

import logging
import random
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from .domain import Bloom, Chapter, Provenance, QAPair, Section, Split
from .errors import AnswerError, ExemplarError, GenerationError, InvalidInputError
from .gateway import Gateway, request_json, user_request
from .gateway.core import JSON_VALIDATION_ERRORS
from .prompts import (
    QUESTION_SYSTEM_PROMPT,
    render_answer_prompt,
    render_article,
    render_bridge_question_prompt,
    render_cot_prompt,
    render_few_shot_prompt,
    render_next_paragraph_prompt,
    render_question_prompt,
)
from .util import derive_seed

logger = logging.getLogger(__name__)

FEW_SHOT_K = 5


class Strategy(str, Enum):
    ZERO_SHOT = "zero_shot"
    FEW_SHOT = "few_shot"
    COT = "cot"
    BLOOM_BASED = "bloom_based"
    FINE_TUNED = "fine_tuned"


@dataclass(frozen=True)
class GenerationContext:
    """Anchor section plus everything the reader has already seen."""

    chapter_id: str
    anchor: Section
    preceding: tuple[Section, ...] = ()

    def __post_init__(self):
        for section in self.preceding:
            if section.index >= self.anchor.index:
                raise InvalidInputError(
                    f"preceding section {section.index} not before anchor {self.anchor.index}"
                )


class BloomSampler:
    """Seeded sampler over a cognitive-level distribution.

    Built from train-split label counts; draws are serialized so the stream
    is reproducible for a given seed.
    """

    def __init__(self, distribution: Mapping[Bloom, float], seed: int):
        total = sum(distribution.values())
        if abs(total - 1.0) > 1e-9:
            raise InvalidInputError(f"distribution sums to {total!r}, expected 1")
        self.distribution = dict(distribution)
        self.seed = seed
        self._levels = list(self.distribution)
        self._weights = [self.distribution[b] for b in self._levels]
        self._rng = random.Random(seed)
        self._lock = threading.Lock()

    @classmethod
    def from_counts(cls, counts: Mapping[Bloom, int], seed: int) -> "BloomSampler":
        total = sum(counts.values())
        if total <= 0:
            raise InvalidInputError("no labels to build a sampler from")
        return cls({b: c / total for b, c in counts.items() if c > 0}, seed)

    def sample(self) -> Bloom:
        with self._lock:
            return self._rng.choices(self._levels, weights=self._weights, k=1)[0]


@dataclass(frozen=True)
class GeneratedQuestion:
    question: str
    strategy: Strategy
    model_id: str
    trial: int
    seed: int
    system_prompt: str
    user_prompt: str
    bloom_level: Bloom | None = None

    def provenance(self) -> Provenance:
        return Provenance(
            strategy=self.strategy.value,
            model_id=self.model_id,
            trial=self.trial,
            seed=self.seed,
            bloom_level=self.bloom_level,
        )


def _question_validator(parsed: Any) -> str:
    question = parsed["question"]
    if not isinstance(question, str) or not question.strip():
        raise ValueError("question missing or empty")
    return question.strip()


def generate_question(
    ctx: GenerationContext,
    strategy: Strategy,
    gateway: Gateway,
    model_id: str,
    *,
    trial: int = 0,
    seed: int | None = None,
    temperature: float = 1.0,
    context_budget_chars: int = 24000,
    exemplars: Sequence[tuple[str, str]] | None = None,
    sampler: BloomSampler | None = None,
    retries: int = 3,
    max_tokens: int = 512,
) -> GeneratedQuestion:
    """Produce exactly one question for the anchor section.

    The rendered prompt never contains sections after the anchor; preceding
    context is truncated from the left when it exceeds the budget, the
    anchor never is.
    """
    if seed is None:
        seed = derive_seed(ctx.chapter_id, ctx.anchor.index, trial)
    article = render_article(ctx.preceding, context_budget_chars)
    bloom_level: Bloom | None = None

    if strategy in (Strategy.ZERO_SHOT, Strategy.FINE_TUNED):
        user_prompt = render_question_prompt(article, ctx.anchor.content)
    elif strategy is Strategy.COT:
        user_prompt = render_cot_prompt(article, ctx.anchor.content)
    elif strategy is Strategy.FEW_SHOT:
        if exemplars is None or len(exemplars) < FEW_SHOT_K:
            raise ExemplarError(
                f"few-shot generation needs >= {FEW_SHOT_K} exemplars, "
                f"got {0 if exemplars is None else len(exemplars)}"
            )
        user_prompt = render_few_shot_prompt(
            list(exemplars)[:FEW_SHOT_K], article, ctx.anchor.content
        )
    elif strategy is Strategy.BLOOM_BASED:
        if sampler is None:
            raise GenerationError("bloom-based generation needs a BloomSampler")
        bloom_level = sampler.sample()
        full_context = (article + "\n\n" + ctx.anchor.content).strip()
        paragraph_request = user_request(
            model_id,
            render_next_paragraph_prompt(bloom_level, full_context),
            system=QUESTION_SYSTEM_PROMPT,
            temperature=temperature,
            seed=seed,
            max_tokens=max_tokens,
        )
        try:
            next_paragraph = request_json(
                gateway,
                paragraph_request,
                lambda parsed: str(parsed["next_paragraph"]),
                retries=retries,
            )
        except JSON_VALIDATION_ERRORS as exc:
            raise GenerationError(f"next-paragraph step failed: {exc}") from exc
        user_prompt = render_bridge_question_prompt(full_context, next_paragraph)
    else:  # pragma: no cover - exhaustive over the enum
        raise GenerationError(f"unknown strategy {strategy!r}")

    request = user_request(
        model_id,
        user_prompt,
        system=QUESTION_SYSTEM_PROMPT,
        temperature=temperature,
        seed=seed,
        max_tokens=max_tokens,
    )
    try:
        question = request_json(gateway, request, _question_validator, retries=retries)
    except JSON_VALIDATION_ERRORS as exc:
        raise GenerationError(
            f"{ctx.chapter_id} section {ctx.anchor.index}: question generation failed: {exc}"
        ) from exc
    return GeneratedQuestion(
        question=question,
        strategy=strategy,
        model_id=model_id,
        trial=trial,
        seed=seed,
        system_prompt=QUESTION_SYSTEM_PROMPT,
        user_prompt=user_prompt,
        bloom_level=bloom_level,
    )


def generate_answers(
    questions: Sequence[str],
    gateway: Gateway,
    model_id: str,
    *,
    seed: int = 0,
    temperature: float = 0.0,
    retries: int = 3,
    max_tokens: int = 2048,
) -> list[str]:
    """Answer a batch of questions in one call, order preserved.

    The prompt is rendered from the questions alone.
    """
    if not questions:
        raise AnswerError("no questions to answer")
    request = user_request(
        model_id,
        render_answer_prompt(questions),
        temperature=temperature,
        seed=seed,
        max_tokens=max_tokens,
    )

    def validate(parsed: Any) -> list[str]:
        pairs = parsed["qa_pairs"]
        if len(pairs) != len(questions):
            raise ValueError(f"expected {len(questions)} answers, got {len(pairs)}")
        answers = []
        for entry in pairs:
            answer = entry["answer"]
            if not isinstance(answer, str):
                raise ValueError("answer must be a string")
            answers.append(answer)
        return answers

    try:
        return request_json(gateway, request, validate, retries=retries)
    except JSON_VALIDATION_ERRORS as exc:
        raise AnswerError(f"answer generation failed: {exc}") from exc


@dataclass(frozen=True)
class GenerationRecord:
    """A QA pair plus everything needed to reproduce and export it."""

    qa: QAPair
    chapter_id: str
    subject: str
    chapter_ordinal: int
    system_prompt: str
    user_prompt: str

    def to_dict(self) -> dict[str, Any]:
        from .domain import qa_pair_to_dict

        return {
            "qa": qa_pair_to_dict(self.qa),
            "chapter_id": self.chapter_id,
            "subject": self.subject,
            "chapter_ordinal": self.chapter_ordinal,
            "system_prompt": self.system_prompt,
            "user_prompt": self.user_prompt,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GenerationRecord":
        from .domain import qa_pair_from_dict

        return cls(
            qa=qa_pair_from_dict(data["qa"]),
            chapter_id=data["chapter_id"],
            subject=data["subject"],
            chapter_ordinal=data["chapter_ordinal"],
            system_prompt=data["system_prompt"],
            user_prompt=data["user_prompt"],
        )


def generate_chapter_pairs(
    chapter: Chapter,
    strategy: Strategy,
    gateway: Gateway,
    model_id: str,
    *,
    trial: int = 0,
    temperature: float = 1.0,
    answer_temperature: float = 0.0,
    context_budget_chars: int = 24000,
    exemplars: Sequence[tuple[str, str]] | None = None,
    sampler: BloomSampler | None = None,
    retries: int = 3,
) -> list[GenerationRecord]:
    """One question per section, then one batched answer call per chapter."""
    generated: list[GeneratedQuestion] = []
    for k, anchor in enumerate(chapter.sections):
        ctx = GenerationContext(
            chapter_id=chapter.id,
            anchor=anchor,
            preceding=tuple(chapter.sections[:k]),
        )
        generated.append(
            generate_question(
                ctx,
                strategy,
                gateway,
                model_id,
                trial=trial,
                temperature=temperature,
                context_budget_chars=context_budget_chars,
                exemplars=exemplars,
                sampler=sampler,
                retries=retries,
            )
        )
    answers = generate_answers(
        [g.question for g in generated],
        gateway,
        model_id,
        seed=derive_seed("answers", chapter.id, trial),
        temperature=answer_temperature,
        retries=retries,
    )
    records = []
    for gen, answer, anchor in zip(generated, answers, chapter.sections):
        pair = QAPair.build(
            question=gen.question,
            answer=answer,
            anchor_section=anchor.index,
            generator=gen.provenance(),
        )
        records.append(
            GenerationRecord(
                qa=pair,
                chapter_id=chapter.id,
                subject=chapter.subject,
                chapter_ordinal=chapter.ordinal,
                system_prompt=gen.system_prompt,
                user_prompt=gen.user_prompt,
            )
        )
    return records


# -- exemplars and training data -------------------------------------------------


def exemplar_pool(chapters: Iterable[Chapter]) -> list[tuple[str, str]]:
    """(section content, exam question) pairs from aligned train chapters."""
    pool: list[tuple[str, str]] = []
    for chapter in chapters:
        if chapter.split is not Split.TRAIN:
            continue
        by_index = {s.index: s for s in chapter.sections}
        for question in chapter.exam.questions:
            for k in question.aligned_sections:
                section = by_index.get(k)
                if section is not None:
                    pool.append((section.content, question.text))
    return pool


def sample_exemplars(
    pool: Sequence[tuple[str, str]], seed: int, k: int = FEW_SHOT_K
) -> list[tuple[str, str]]:
    """Uniform sample without replacement, fixed for a given seed."""
    if len(pool) < k:
        raise ExemplarError(f"exemplar pool has {len(pool)} pairs, need >= {k}")
    rng = random.Random(seed)
    return rng.sample(list(pool), k)


def bloom_counts(chapters: Iterable[Chapter]) -> dict[Bloom, int]:
    counts: dict[Bloom, int] = {}
    for chapter in chapters:
        if chapter.split is not Split.TRAIN:
            continue
        for question in chapter.exam.questions:
            if question.bloom is not None:
                counts[question.bloom] = counts.get(question.bloom, 0) + 1
    return counts


def build_sft_dataset(
    chapters: Iterable[Chapter],
    context_budget_chars: int = 24000,
) -> tuple[list[dict[str, Any]], int]:
    """Supervised pairs: generation prompt for an aligned section -> exam question.

    Questions without alignment contribute nothing; they are counted and
    skipped. Returns (examples, skipped_count).
    """
    examples: list[dict[str, Any]] = []
    skipped = 0
    ordered = sorted(
        (c for c in chapters if c.split is Split.TRAIN),
        key=lambda c: (c.subject, c.ordinal),
    )
    for chapter in ordered:
        by_index = {s.index: s for s in chapter.sections}
        for question in chapter.exam.questions:
            if not question.aligned_sections:
                skipped += 1
                continue
            for k in sorted(question.aligned_sections):
                anchor = by_index[k]
                preceding = tuple(s for s in chapter.sections if s.index < k)
                article = render_article(preceding, context_budget_chars)
                examples.append(
                    {
                        "messages": [
                            {"role": "system", "content": QUESTION_SYSTEM_PROMPT},
                            {
                                "role": "user",
                                "content": render_question_prompt(article, anchor.content),
                            },
                            {"role": "assistant", "content": question.text},
                        ]
                    }
                )
    return examples, skipped
