"""Reader simulation: a learner takes the exam from study material alone,
an evaluator scores each response against the document.

The learner prompt carries only QA pairs; the evaluator prompt is the one
place chapter text appears.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

from .domain import Chapter, Exam, ExamAttempt, QAPair, attempt_to_dict
from .errors import ScoringError, SimulationError
from .gateway import Gateway, request_json, user_request
from .gateway.core import JSON_VALIDATION_ERRORS
from .prompts import REFUSAL, render_evaluator_prompt, render_learner_prompt
from .util import short_hash

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StudySet:
    """An unordered collection of QA pairs; the empty set is the no-study
    condition. Identity is a hash of the sorted pair ids."""

    pairs: tuple[QAPair, ...]
    id: str

    @classmethod
    def of(cls, pairs: Iterable[QAPair]) -> "StudySet":
        pairs = tuple(pairs)
        return cls(pairs=pairs, id=short_hash(sorted(p.id for p in pairs)))

    def without(self, qa_id: str) -> "StudySet":
        return StudySet.of(p for p in self.pairs if p.id != qa_id)

    def __len__(self) -> int:
        return len(self.pairs)


EMPTY_STUDY_SET = StudySet.of(())


@dataclass(frozen=True)
class TrialAggregate:
    trial_scores: tuple[float, ...]
    mean: float
    count: int

    @classmethod
    def from_scores(cls, scores: Sequence[float]) -> "TrialAggregate":
        scores = tuple(scores)
        if not scores:
            raise SimulationError("cannot aggregate zero trials")
        return cls(trial_scores=scores, mean=sum(scores) / len(scores), count=len(scores))


class ExamSimulator:
    """Runs learner and evaluator passes for one chapter's exam."""

    def __init__(
        self,
        gateway: Gateway,
        chapter: Chapter,
        *,
        learner_model_id: str,
        evaluator_model_id: str | None = None,
        temperature: float = 0.0,
        context_budget_chars: int = 24000,
        retries: int = 3,
        max_tokens: int = 4096,
        persist_dir: Path | None = None,
    ):
        self.gateway = gateway
        self.chapter = chapter
        self.exam: Exam = chapter.exam
        self.learner_model_id = learner_model_id
        self.evaluator_model_id = evaluator_model_id or learner_model_id
        self.temperature = temperature
        self.context_budget_chars = context_budget_chars
        self.retries = retries
        self.max_tokens = max_tokens
        self.persist_dir = Path(persist_dir) if persist_dir else None
        self.clamp_events = 0
        self._full_text = chapter.text()
        self._sections_by_index = {s.index: s for s in chapter.sections}

    # -- learner ---------------------------------------------------------

    def take_exam(self, study: StudySet, seed: int) -> dict[str, str]:
        """Collect one free-text response per exam question.

        Questions the learner leaves unanswered are filled with the literal
        refusal string so scoring always sees a complete map.
        """
        questions = self.exam.questions
        if not questions:
            raise SimulationError(f"{self.chapter.id}: exam is empty")
        prompt = render_learner_prompt(study.pairs, questions)
        request = user_request(
            self.learner_model_id,
            prompt,
            temperature=self.temperature,
            seed=seed,
            max_tokens=self.max_tokens,
        )

        def validate(parsed: Any) -> dict[str, Any]:
            if not isinstance(parsed, dict):
                raise ValueError("learner reply must be a JSON object")
            return parsed

        try:
            parsed = request_json(self.gateway, request, validate, retries=self.retries)
        except JSON_VALIDATION_ERRORS as exc:
            raise SimulationError(
                f"{self.chapter.id}: learner output unusable: {exc}"
            ) from exc
        responses: dict[str, str] = {}
        for number, question in enumerate(questions, start=1):
            value = parsed.get(str(number))
            if isinstance(value, str) and value.strip():
                responses[question.id] = value
            else:
                responses[question.id] = REFUSAL
        return responses

    # -- evaluator ---------------------------------------------------------

    def _document_for(self, question) -> str:
        if len(self._full_text) <= self.context_budget_chars:
            return self._full_text
        if question.aligned_sections:
            parts = [
                self._sections_by_index[k].content
                for k in question.aligned_sections
                if k in self._sections_by_index
            ]
            if parts:
                return "\n\n".join(parts)
        # No alignment to narrow by; the whole chapter is the only honest input.
        return self._full_text

    def score_attempt(
        self, study_set_id: str, responses: dict[str, str], seed: int
    ) -> ExamAttempt:
        scores: dict[str, float] = {}
        for question in self.exam.questions:
            prediction = responses[question.id]
            prompt = render_evaluator_prompt(
                self._document_for(question),
                question.text,
                question.reference_answer,
                prediction,
            )
            request = user_request(
                self.evaluator_model_id,
                prompt,
                temperature=self.temperature,
                seed=seed,
                max_tokens=512,
            )

            def validate(parsed: Any) -> float:
                score = parsed["score"]
                if isinstance(score, bool) or not isinstance(score, (int, float)):
                    raise ValueError(f"score must be numeric, got {score!r}")
                return float(score)

            try:
                value = request_json(self.gateway, request, validate, retries=self.retries)
            except JSON_VALIDATION_ERRORS as exc:
                raise ScoringError(
                    f"{self.chapter.id}/{question.id}: evaluator output unusable: {exc}"
                ) from exc
            if not 0.0 <= value <= 1.0:
                clamped = min(max(value, 0.0), 1.0)
                logger.warning(
                    "%s/%s: evaluator score %.4f clamped to %.1f",
                    self.chapter.id,
                    question.id,
                    value,
                    clamped,
                )
                self.clamp_events += 1
                value = clamped
            scores[question.id] = value
        return ExamAttempt.build(study_set_id, responses, scores)

    # -- trials -----------------------------------------------------------

    def simulate(self, study: StudySet, trials: int, base_seed: int) -> TrialAggregate:
        """Run `trials` independent learner+evaluator passes with seeds
        base_seed, base_seed+1, ... and aggregate the exam scores."""
        if trials < 1:
            raise SimulationError("trials must be >= 1")
        trial_scores: list[float] = []
        for trial in range(trials):
            seed = base_seed + trial
            try:
                responses = self.take_exam(study, seed)
                attempt = self.score_attempt(study.id, responses, seed)
            except (SimulationError, ScoringError) as exc:
                raise type(exc)(f"trial {trial}: {exc}") from exc
            self._persist(study, trial, seed, attempt)
            trial_scores.append(attempt.exam_score)
        return TrialAggregate.from_scores(trial_scores)

    def _persist(self, study: StudySet, trial: int, seed: int, attempt: ExamAttempt) -> None:
        if self.persist_dir is None:
            return
        directory = self.persist_dir / self.chapter.id
        directory.mkdir(parents=True, exist_ok=True)
        payload = attempt_to_dict(attempt)
        payload.update({"chapter_id": self.chapter.id, "trial": trial, "seed": seed})
        path = directory / f"{study.id}_t{trial}.json"
        path.write_text(
            json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
