"""Shared fixture builders: keyword chapters, pairs, and scripted gateways."""

from __future__ import annotations

from typing import Sequence

from studysim.domain import Chapter, Exam, ExamQuestion, Provenance, QAPair, Section, Split
from studysim.gateway import Gateway, MockBackend, MockScript
from studysim.synthetic import default_mock_script


def keyword_chapter(
    question_kws: Sequence[str],
    section_kws: Sequence[str] | None = None,
    chapter_id: str = "Test-001",
    subject: str = "Test",
    ordinal: int = 1,
    split: Split = Split.TRAIN,
) -> Chapter:
    """Chapter whose exam question i requires keyword question_kws[i]."""
    if section_kws is None:
        section_kws = list(dict.fromkeys(question_kws))
    sections = tuple(
        Section(index=i, content=f"Part {i} of the chapter introduces {kw} in detail.")
        for i, kw in enumerate(section_kws, start=1)
    )
    questions = tuple(
        ExamQuestion(id=f"q{i:02d}", text=f"Define {kw}.")
        for i, kw in enumerate(question_kws, start=1)
    )
    return Chapter(
        id=chapter_id,
        subject=subject,
        title="keyword fixture",
        sections=sections,
        exam=Exam(questions=questions),
        split=split,
        ordinal=ordinal,
    )


def keyword_pair(kw: str, trial: int = 0, variant: str = "", anchor: int = 1) -> QAPair:
    return QAPair.build(
        question=f"What is {kw}?{variant}",
        answer=f"{kw} is a fixture concept.",
        anchor_section=anchor,
        generator=Provenance(strategy="zero_shot", model_id="mock-model", trial=trial, seed=0),
    )


def keyword_gateway(
    known_keywords: Sequence[str] = (),
    extra_rules: Sequence[dict] = (),
    cache=None,
) -> tuple[Gateway, MockBackend]:
    script_dict = default_mock_script(known_keywords)
    if extra_rules:
        script_dict = {"rules": list(extra_rules) + script_dict["rules"]}
    backend = MockBackend(MockScript.from_dict(script_dict))
    gateway = Gateway(backend, cache=cache)
    return gateway, backend
