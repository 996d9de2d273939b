"""Shared vocabulary: chapters, exams, QA pairs, attempts, utility records.

All values are immutable after construction and therefore safe to share
across worker threads. The on-disk representation is one JSON document per
chapter whose field names mirror the dataclass fields exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping

from .errors import EmptyExamError, InvalidScoreError
from .util import short_hash

SCORE_TOLERANCE = 1e-12

# Canonical subjects; anything else is treated as a user-defined subject name.
KNOWN_SUBJECTS = ("Microbiology", "Chemistry", "Economics", "Sociology", "USHistory")

EXAM_MIN_QUESTIONS = 10
EXAM_MAX_QUESTIONS = 25


class Split(str, Enum):
    TRAIN = "Train"
    TEST = "Test"
    UNASSIGNED = "Unassigned"


class Bloom(str, Enum):
    REMEMBERING = "Remembering"
    UNDERSTANDING = "Understanding"
    APPLYING = "Applying"
    ANALYZING = "Analyzing"
    EVALUATING = "Evaluating"
    CREATING = "Creating"


BLOOM_ORDER: tuple[Bloom, ...] = tuple(Bloom)


@dataclass(frozen=True)
class Section:
    """One contiguous slice of a chapter; ``index`` is the 1-based anchor position."""

    index: int
    content: str


@dataclass(frozen=True)
class ExamQuestion:
    id: str
    text: str
    reference_answer: str | None = None
    bloom: Bloom | None = None
    aligned_sections: tuple[int, ...] = ()


@dataclass(frozen=True)
class Exam:
    questions: tuple[ExamQuestion, ...]


@dataclass(frozen=True)
class Provenance:
    """How a QA pair came to exist: strategy, backing model, trial and seed."""

    strategy: str
    model_id: str
    trial: int
    seed: int
    bloom_level: Bloom | None = None


@dataclass(frozen=True)
class QAPair:
    id: str
    question: str
    answer: str
    anchor_section: int
    generator: Provenance

    @staticmethod
    def make_id(question: str, answer: str, anchor_section: int, trial: int) -> str:
        # Content hash keeps ids stable across runs so caching and
        # deduplication survive restarts; the trial index keeps repeated
        # generations distinct even when their texts coincide.
        return short_hash(question, answer, anchor_section, trial)

    @classmethod
    def build(
        cls,
        question: str,
        answer: str,
        anchor_section: int,
        generator: Provenance,
    ) -> "QAPair":
        return cls(
            id=cls.make_id(question, answer, anchor_section, generator.trial),
            question=question,
            answer=answer,
            anchor_section=anchor_section,
            generator=generator,
        )


@dataclass(frozen=True)
class Chapter:
    id: str
    subject: str
    title: str
    sections: tuple[Section, ...]
    exam: Exam
    split: Split = Split.UNASSIGNED
    ordinal: int = 0

    def section_indices(self) -> tuple[int, ...]:
        return tuple(s.index for s in self.sections)

    def text(self) -> str:
        return "\n\n".join(s.content for s in self.sections)

    def with_split(self, split: Split) -> "Chapter":
        return replace(self, split=split)


@dataclass(frozen=True)
class ExamAttempt:
    """One learner pass over an exam for a given study set."""

    study_set_id: str
    responses: Mapping[str, str]
    per_question_scores: Mapping[str, float]
    exam_score: float

    def __post_init__(self):
        if set(self.responses) != set(self.per_question_scores):
            raise InvalidScoreError("responses and per_question_scores cover different questions")
        recomputed = exam_score(self.per_question_scores)
        if abs(recomputed - self.exam_score) > SCORE_TOLERANCE:
            raise InvalidScoreError(
                f"exam_score {self.exam_score!r} disagrees with mean {recomputed!r}"
            )

    @classmethod
    def build(
        cls,
        study_set_id: str,
        responses: Mapping[str, str],
        per_question_scores: Mapping[str, float],
    ) -> "ExamAttempt":
        return cls(
            study_set_id=study_set_id,
            responses=dict(responses),
            per_question_scores=dict(per_question_scores),
            exam_score=exam_score(per_question_scores),
        )


@dataclass(frozen=True)
class UtilityRecord:
    """Component scores and averaged gain for one QA pair.

    ``utility`` is the mean of the single-one gain (s_single - s_empty) and
    the all-but-one gain (s_full - s_all_but_one).
    """

    qa_id: str
    s_empty: float
    s_full: float
    s_single: float
    s_all_but_one: float
    utility: float

    @classmethod
    def from_scores(
        cls,
        qa_id: str,
        s_empty: float,
        s_full: float,
        s_single: float,
        s_all_but_one: float,
    ) -> "UtilityRecord":
        utility = ((s_single - s_empty) + (s_full - s_all_but_one)) / 2
        return cls(qa_id, s_empty, s_full, s_single, s_all_but_one, utility)

    def recomputed_utility(self) -> float:
        return ((self.s_single - self.s_empty) + (self.s_full - self.s_all_but_one)) / 2

    def is_consistent(self, tol: float = SCORE_TOLERANCE) -> bool:
        return abs(self.utility - self.recomputed_utility()) <= tol


# -- operations --------------------------------------------------------------


def exam_score(per_question: Mapping[str, float]) -> float:
    """Arithmetic mean of per-question scores, each required to lie in [0, 1]."""
    if not per_question:
        raise EmptyExamError("cannot score an empty exam")
    for qid, value in per_question.items():
        if not isinstance(value, (int, float)) or math.isnan(value) or not 0.0 <= value <= 1.0:
            raise InvalidScoreError(f"score for {qid!r} out of [0, 1]: {value!r}")
    return sum(per_question.values()) / len(per_question)


@dataclass(frozen=True)
class Violation:
    """A named invariant breach; data, not an exception."""

    rule: str
    field: str
    detail: str = ""

    def __str__(self) -> str:
        suffix = f"({self.detail})" if self.detail else ""
        return f"{self.rule}{suffix} [{self.field}]"


def validate_chapter(chapter: Chapter, curated: bool = True) -> list[Violation]:
    """Check the structural invariants of a chapter.

    ``curated=False`` relaxes the exam-size rule, which only applies after
    curation. Violations are returned as data; nothing is raised.
    """
    out: list[Violation] = []

    if not chapter.sections:
        out.append(Violation("NoSections", "sections"))
    else:
        seen: set[int] = set()
        for s in chapter.sections:
            if s.index in seen:
                out.append(Violation("DuplicateSectionIndex", "sections", str(s.index)))
            seen.add(s.index)
            if not s.content.strip():
                out.append(Violation("EmptySectionContent", "sections", str(s.index)))
        expected = set(range(1, len(chapter.sections) + 1))
        if seen != expected:
            out.append(
                Violation("NonContiguousSections", "sections", f"indices {sorted(seen)}")
            )

    n_questions = len(chapter.exam.questions)
    if curated:
        if n_questions < EXAM_MIN_QUESTIONS:
            out.append(Violation("ExamTooSmall", "exam.questions", str(n_questions)))
        elif n_questions > EXAM_MAX_QUESTIONS:
            out.append(Violation("ExamTooLarge", "exam.questions", str(n_questions)))

    qids = [q.id for q in chapter.exam.questions]
    if len(set(qids)) != len(qids):
        dupes = sorted({q for q in qids if qids.count(q) > 1})
        out.append(Violation("DuplicateQuestionId", "exam.questions", ", ".join(dupes)))

    indices = set(chapter.section_indices())
    for q in chapter.exam.questions:
        if not q.text.strip():
            out.append(Violation("EmptyQuestionText", "exam.questions", q.id))
        bad = [k for k in q.aligned_sections if k not in indices]
        if bad:
            out.append(
                Violation("AlignedSectionOutOfRange", "exam.questions", f"{q.id}: {bad}")
            )

    return out


# -- serialization ------------------------------------------------------------


def chapter_to_dict(chapter: Chapter) -> dict[str, Any]:
    return {
        "id": chapter.id,
        "subject": chapter.subject,
        "title": chapter.title,
        "sections": [{"index": s.index, "content": s.content} for s in chapter.sections],
        "exam": {
            "questions": [
                {
                    "id": q.id,
                    "text": q.text,
                    "reference_answer": q.reference_answer,
                    "bloom": q.bloom.value if q.bloom else None,
                    "aligned_sections": list(q.aligned_sections),
                }
                for q in chapter.exam.questions
            ]
        },
        "split": chapter.split.value,
        "ordinal": chapter.ordinal,
    }


def chapter_from_dict(data: Mapping[str, Any]) -> Chapter:
    return Chapter(
        id=data["id"],
        subject=data["subject"],
        title=data["title"],
        sections=tuple(
            Section(index=s["index"], content=s["content"]) for s in data["sections"]
        ),
        exam=Exam(
            questions=tuple(
                ExamQuestion(
                    id=q["id"],
                    text=q["text"],
                    reference_answer=q.get("reference_answer"),
                    bloom=Bloom(q["bloom"]) if q.get("bloom") else None,
                    aligned_sections=tuple(q.get("aligned_sections") or ()),
                )
                for q in data["exam"]["questions"]
            )
        ),
        split=Split(data.get("split", "Unassigned")),
        ordinal=int(data.get("ordinal", 0)),
    )


def qa_pair_to_dict(pair: QAPair) -> dict[str, Any]:
    return {
        "id": pair.id,
        "question": pair.question,
        "answer": pair.answer,
        "anchor_section": pair.anchor_section,
        "generator": {
            "strategy": pair.generator.strategy,
            "model_id": pair.generator.model_id,
            "trial": pair.generator.trial,
            "seed": pair.generator.seed,
            "bloom_level": pair.generator.bloom_level.value
            if pair.generator.bloom_level
            else None,
        },
    }


def qa_pair_from_dict(data: Mapping[str, Any]) -> QAPair:
    gen = data["generator"]
    return QAPair(
        id=data["id"],
        question=data["question"],
        answer=data["answer"],
        anchor_section=data["anchor_section"],
        generator=Provenance(
            strategy=gen["strategy"],
            model_id=gen["model_id"],
            trial=gen["trial"],
            seed=gen["seed"],
            bloom_level=Bloom(gen["bloom_level"]) if gen.get("bloom_level") else None,
        ),
    )


def attempt_to_dict(attempt: ExamAttempt) -> dict[str, Any]:
    return {
        "study_set_id": attempt.study_set_id,
        "responses": dict(attempt.responses),
        "per_question_scores": dict(attempt.per_question_scores),
        "exam_score": attempt.exam_score,
    }


def utility_record_to_dict(record: UtilityRecord) -> dict[str, Any]:
    return {
        "qa_id": record.qa_id,
        "s_empty": record.s_empty,
        "s_full": record.s_full,
        "s_single": record.s_single,
        "s_all_but_one": record.s_all_but_one,
        "utility": record.utility,
    }


def utility_record_from_dict(data: Mapping[str, Any]) -> UtilityRecord:
    return UtilityRecord(
        qa_id=data["qa_id"],
        s_empty=data["s_empty"],
        s_full=data["s_full"],
        s_single=data["s_single"],
        s_all_but_one=data["s_all_but_one"],
        utility=data["utility"],
    )
