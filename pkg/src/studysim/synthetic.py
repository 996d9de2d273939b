"""Synthetic keyword corpora and the scripted backend that can run them.

Each section of a synthetic chapter introduces one unique ``KW_...`` token
and every exam question names exactly one of those tokens. Under the
scripted backend the learner answers a question correctly precisely when
its token appears in the study materials, so exam scores and utilities are
exactly computable by hand; this is the workhorse for end-to-end tests and
for trying the CLI without a live endpoint.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence

from .domain import KNOWN_SUBJECTS

DEFAULT_SECTIONS = 2
DEFAULT_QUESTIONS = 10


def keyword_for(subject: str, ordinal: int, section: int) -> str:
    tag = "".join(ch for ch in subject.upper() if ch.isalnum())[:4] or "SUBJ"
    return f"KW{tag}{ordinal:02d}S{section}"


def chapter_body(subject: str, ordinal: int, sections: int) -> str:
    blocks = [
        "Learning Objectives\nBy the end of this chapter you can explain the key terms."
    ]
    for s in range(1, sections + 1):
        kw = keyword_for(subject, ordinal, s)
        blocks.append(
            f"Part {s} of chapter {ordinal} introduces {kw}, the central idea "
            f"of this part. Understanding {kw} prepares the reader for what follows."
        )
    blocks.append("Summary\nThis chapter covered the key terms above.")
    return "\n\n".join(blocks) + "\n"


def chapter_exam(subject: str, ordinal: int, sections: int, questions: int) -> str:
    lines = ["## Review Questions", ""]
    for j in range(1, questions + 1):
        section = ((j - 1) % sections) + 1
        kw = keyword_for(subject, ordinal, section)
        lines.append(f"{j}. Define {kw} and state why it matters.")
        if j % 2 == 0:
            lines.append(f"   Answer: {kw} is the central idea of part {section}.")
        lines.append("")
    return "\n".join(lines)


def write_chapter(
    root: Path,
    subject: str,
    ordinal: int,
    sections: int = DEFAULT_SECTIONS,
    questions: int = DEFAULT_QUESTIONS,
    slug: str | None = None,
) -> Path:
    directory = root / subject / f"{ordinal:02d}_{slug or f'chapter-{ordinal}'}"
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "body.md").write_text(
        chapter_body(subject, ordinal, sections), encoding="utf-8"
    )
    (directory / "exam.md").write_text(
        chapter_exam(subject, ordinal, sections, questions), encoding="utf-8"
    )
    return directory


def build_corpus(
    root: Path | str,
    subjects: Sequence[str] = KNOWN_SUBJECTS,
    chapters_per_subject: int = 26,
    sections: int = DEFAULT_SECTIONS,
    questions: int = DEFAULT_QUESTIONS,
    with_undersized_chapter: bool = True,
    with_oversized_chapter: bool = True,
) -> Path:
    """Write a full fixture corpus.

    With the defaults each subject gets 25 curatable chapters (the split
    minimum) plus one that must be rejected for having fewer than 10 exam
    questions; one chapter carries 30 questions to exercise the cap.
    """
    root = Path(root)
    for subject in subjects:
        for ordinal in range(1, chapters_per_subject + 1):
            if with_undersized_chapter and ordinal == chapters_per_subject:
                write_chapter(root, subject, ordinal, sections, questions=9)
            elif with_oversized_chapter and ordinal == 2:
                write_chapter(root, subject, ordinal, sections, questions=30)
            else:
                write_chapter(root, subject, ordinal, sections, questions)
    return root


def default_mock_script(known_keywords: Sequence[str] = ()) -> dict[str, Any]:
    """Script covering every pipeline role over keyword fixtures.

    `known_keywords` simulates prior knowledge: the learner answers those
    even with an empty study set, making the no-study baseline non-zero.
    """
    learner_params: dict[str, Any] = {}
    if known_keywords:
        learner_params["known_keywords"] = list(known_keywords)
    return {
        "rules": [
            {
                "match": {"contains": "Instructions for extracting sections"},
                "behavior": "sections_from_paragraphs",
            },
            {
                "match": {"contains": "Classify the questions into one of the six"},
                "behavior": "bloom_from_hash",
            },
            {
                "match": {"contains": "mapping exam questions to the sections"},
                "behavior": "align_by_keyword",
            },
            {
                "match": {"contains": "structured learning simulation"},
                "behavior": "keyword_learner",
                "params": learner_params,
            },
            {
                "match": {"contains": "teacher who is evaluating"},
                "behavior": "keyword_evaluator",
            },
            {
                "match": {"contains": "Answer each question shortly"},
                "behavior": "answers_echo",
            },
            {
                "match": {"contains": "generate the next paragraph"},
                "behavior": "next_paragraph",
            },
            {
                "match": {"contains": "key question that connects"},
                "behavior": "question_from_anchor",
            },
            {
                "match": {"contains": "Generate a question that helps the student"},
                "behavior": "question_from_anchor",
            },
            {
                "match": {"contains": "generate a question that helps the student"},
                "behavior": "question_from_anchor",
            },
            {
                "match": {"contains": "curious reader going through the article"},
                "behavior": "salience_from_hash",
            },
            {
                "match": {"contains": "reader encountering a question in the article"},
                "behavior": "logprobs_from_hash",
            },
            {"match": {"default": True}, "response": "{}"},
        ]
    }


def write_mock_script(path: Path | str, known_keywords: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(default_mock_script(known_keywords), indent=2) + "\n",
        encoding="utf-8",
    )
    return path


def main(argv: Sequence[str] | None = None) -> int:
    import argparse

    parser = argparse.ArgumentParser(
        description="Write a synthetic demo corpus and matching mock script."
    )
    parser.add_argument("out", type=Path, help="output directory")
    parser.add_argument("--subjects", nargs="*", default=list(KNOWN_SUBJECTS))
    parser.add_argument("--chapters", type=int, default=26)
    parser.add_argument("--sections", type=int, default=DEFAULT_SECTIONS)
    parser.add_argument("--questions", type=int, default=DEFAULT_QUESTIONS)
    args = parser.parse_args(argv)

    corpus_dir = args.out / "corpus"
    build_corpus(
        corpus_dir,
        subjects=args.subjects,
        chapters_per_subject=args.chapters,
        sections=args.sections,
        questions=args.questions,
    )
    script = write_mock_script(args.out / "mock_script.json")
    print(f"corpus: {corpus_dir}")
    print(f"mock script: {script}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
