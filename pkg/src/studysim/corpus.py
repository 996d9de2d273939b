"""Turns raw chapter files into curated chapters.

Stages per chapter run in order: segment the body, extract and cap the
exam, annotate Bloom categories, align questions to sections. Chapters are
independent, so the orchestrator may process them concurrently.
"""

from __future__ import annotations

import csv
import logging
import re
import statistics
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

from .domain import (
    EXAM_MAX_QUESTIONS,
    EXAM_MIN_QUESTIONS,
    Bloom,
    Chapter,
    Exam,
    ExamQuestion,
    Section,
    Split,
)
from .errors import (
    AnnotationError,
    ChapterRejected,
    LayoutError,
    SegmentationError,
    SplitError,
)
from .gateway import Gateway, request_json, user_request
from .gateway.core import JSON_VALIDATION_ERRORS
from .prompts import (
    render_alignment_prompt,
    render_bloom_classify_prompt,
    render_sectioning_prompt,
)
from .util import derive_seed

logger = logging.getLogger(__name__)

TRAIN_CHAPTERS = 20
TEST_CHAPTERS = 5
BLOOM_BATCH_SIZE = 25

_SPLIT_ORDER = {Split.TRAIN: 0, Split.TEST: 1, Split.UNASSIGNED: 2}


@dataclass(frozen=True)
class RawChapterFile:
    subject: str
    ordinal: int
    slug: str
    body_markdown: str
    exam_markdown: str

    @property
    def chapter_id(self) -> str:
        return f"{self.subject}-{self.ordinal:03d}"


@dataclass(frozen=True)
class CorpusStatsRow:
    subject: str
    split: str
    chapter_count: int
    mean_exam_per_chapter: float
    pct_with_reference_answer: float
    mean_sections_per_chapter: float
    section_length_mean: float
    section_length_variance: float


@dataclass(frozen=True)
class CorpusStats:
    rows: tuple[CorpusStatsRow, ...]

    def to_dicts(self) -> list[dict[str, Any]]:
        return [
            {
                "subject": r.subject,
                "split": r.split,
                "chapter_count": r.chapter_count,
                "mean_exam_per_chapter": r.mean_exam_per_chapter,
                "pct_with_reference_answer": r.pct_with_reference_answer,
                "mean_sections_per_chapter": r.mean_sections_per_chapter,
                "section_length_mean": r.section_length_mean,
                "section_length_variance": r.section_length_variance,
            }
            for r in self.rows
        ]


# -- discovery ----------------------------------------------------------------

_DIR_RE = re.compile(r"^(\d+)_(.+)$")


def discover_corpus(corpus_dir: Path | str) -> list[RawChapterFile]:
    """Read a `<subject>/<ordinal>_<slug>/{body.md, exam.md}` tree."""
    root = Path(corpus_dir)
    if not root.is_dir():
        raise LayoutError(f"corpus directory {root} does not exist")
    problems: list[str] = []
    chapters: list[RawChapterFile] = []
    subject_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not subject_dirs:
        raise LayoutError(f"corpus directory {root} has no subject directories")
    for subject_dir in subject_dirs:
        seen_ordinals: set[int] = set()
        chapter_dirs = sorted(p for p in subject_dir.iterdir() if p.is_dir())
        if not chapter_dirs:
            problems.append(f"{subject_dir.name}: no chapter directories")
            continue
        for chapter_dir in chapter_dirs:
            match = _DIR_RE.match(chapter_dir.name)
            if not match:
                problems.append(
                    f"{subject_dir.name}/{chapter_dir.name}: expected <ordinal>_<slug>"
                )
                continue
            ordinal = int(match.group(1))
            if ordinal in seen_ordinals:
                problems.append(
                    f"{subject_dir.name}/{chapter_dir.name}: duplicate ordinal {ordinal}"
                )
                continue
            seen_ordinals.add(ordinal)
            body = chapter_dir / "body.md"
            exam = chapter_dir / "exam.md"
            missing = [p.name for p in (body, exam) if not p.is_file()]
            if missing:
                problems.append(
                    f"{subject_dir.name}/{chapter_dir.name}: missing {', '.join(missing)}"
                )
                continue
            chapters.append(
                RawChapterFile(
                    subject=subject_dir.name,
                    ordinal=ordinal,
                    slug=match.group(2),
                    body_markdown=body.read_text(encoding="utf-8"),
                    exam_markdown=exam.read_text(encoding="utf-8"),
                )
            )
    if problems:
        raise LayoutError("corpus layout violations:\n" + "\n".join(problems))
    return sorted(chapters, key=lambda c: (c.subject, c.ordinal))


# -- exam extraction -----------------------------------------------------------

_QUESTION_RE = re.compile(r"^\s*(\d+)[.)]\s+(.*)$")
_OPTION_RE = re.compile(r"^\s*(?:[a-dA-D][.)]|[-*])\s+(.*)$")
_ANSWER_RE = re.compile(r"^\s*\*{0,2}Answer\*{0,2}\s*[:.]\s*(.*)$", re.IGNORECASE)
_HEADER_RE = re.compile(r"^\s*#{1,6}\s")
# Emphasis markers only; intra-word underscores (identifiers, formulas)
# are content, not markdown.
_MARKDOWN_NOISE_RE = re.compile(r"[*`]|(?<!\w)_+|_+(?!\w)")


def _strip_markdown(text: str) -> str:
    return re.sub(r"\s+", " ", _MARKDOWN_NOISE_RE.sub("", text)).strip()


def parse_exam_markdown(exam_markdown: str) -> list[tuple[str, str | None]]:
    """Parse numbered questions; options fold into the stem, `Answer:` lines
    become reference answers, anything unparseable is dropped."""
    parsed: list[tuple[str, str | None]] = []
    stem_parts: list[str] | None = None
    answer: str | None = None

    def flush():
        nonlocal stem_parts, answer
        if stem_parts is not None:
            stem = _strip_markdown(" ".join(stem_parts))
            if stem:
                parsed.append((stem, answer))
        stem_parts = None
        answer = None

    for line in exam_markdown.splitlines():
        if _HEADER_RE.match(line) or not line.strip():
            continue
        qmatch = _QUESTION_RE.match(line)
        amatch = _ANSWER_RE.match(line)
        omatch = _OPTION_RE.match(line)
        if amatch is not None and stem_parts is not None:
            answer = _strip_markdown(amatch.group(1)) or None
        elif qmatch is not None:
            flush()
            stem_parts = [qmatch.group(2)]
        elif omatch is not None and stem_parts is not None:
            stem_parts.append(omatch.group(1))
        elif stem_parts is not None:
            stem_parts.append(line.strip())
    flush()
    return parsed


def extract_exam(raw: RawChapterFile) -> list[ExamQuestion]:
    """Build the exam; fewer than 10 usable questions rejects the chapter and
    more than 25 are capped to the first 25 in document order."""
    parsed = parse_exam_markdown(raw.exam_markdown)
    if len(parsed) < EXAM_MIN_QUESTIONS:
        raise ChapterRejected(count=len(parsed), chapter=raw.chapter_id)
    parsed = parsed[:EXAM_MAX_QUESTIONS]
    return [
        ExamQuestion(id=f"q{i:02d}", text=stem, reference_answer=answer)
        for i, (stem, answer) in enumerate(parsed, start=1)
    ]


# -- LM-backed stages ----------------------------------------------------------


def segment_sections(
    raw: RawChapterFile,
    gateway: Gateway,
    model_id: str,
    example_input: str | None = None,
    example_output: str | None = None,
    seed: int | None = None,
    retries: int = 3,
    max_tokens: int = 4096,
) -> list[Section]:
    if not raw.body_markdown.strip():
        raise SegmentationError(f"{raw.chapter_id}: empty chapter body")
    kwargs = {}
    if example_input is not None:
        kwargs["example_input"] = example_input
    if example_output is not None:
        kwargs["example_output"] = example_output
    prompt = render_sectioning_prompt(raw.body_markdown, **kwargs)
    request = user_request(
        model_id,
        prompt,
        temperature=0.0,
        seed=seed if seed is not None else derive_seed("segment", raw.chapter_id),
        max_tokens=max_tokens,
    )

    def validate(parsed: Any) -> list[Section]:
        body = parsed["section"]
        if not isinstance(body, dict) or not body:
            raise ValueError("empty section map")
        ordered = sorted(body.items(), key=lambda kv: int(kv[0]))
        sections = []
        for new_index, (_, entry) in enumerate(ordered, start=1):
            content = entry["content"]
            if not isinstance(content, str) or not content.strip():
                raise ValueError("section with empty content")
            sections.append(Section(index=new_index, content=content))
        return sections

    try:
        return request_json(gateway, request, validate, retries=retries)
    except JSON_VALIDATION_ERRORS as exc:
        raise SegmentationError(f"{raw.chapter_id}: segmentation failed: {exc}") from exc


def _parse_bloom(label: Any) -> Bloom:
    if not isinstance(label, str):
        raise ValueError(f"bloom category must be a string, got {label!r}")
    try:
        return Bloom(label.strip().capitalize())
    except ValueError:
        raise ValueError(f"unknown bloom category {label!r}") from None


def classify_bloom(
    questions: Sequence[ExamQuestion],
    gateway: Gateway,
    model_id: str,
    seed: int = 0,
    retries: int = 3,
) -> list[ExamQuestion]:
    """Assign one Bloom category per question, batched <= 25 per call."""
    if not questions:
        raise AnnotationError("no questions to classify")
    annotated: list[ExamQuestion] = []
    for start in range(0, len(questions), BLOOM_BATCH_SIZE):
        batch = questions[start : start + BLOOM_BATCH_SIZE]
        prompt = render_bloom_classify_prompt([q.text for q in batch])
        request = user_request(
            model_id, prompt, temperature=0.0, seed=seed + start, max_tokens=2048
        )

        def validate(parsed: Any, batch=batch) -> list[Bloom]:
            entries = parsed["bloom_categories"]
            if len(entries) != len(batch):
                raise ValueError(
                    f"expected {len(batch)} categories, got {len(entries)}"
                )
            return [_parse_bloom(e["bloom_category"]) for e in entries]

        try:
            labels = request_json(gateway, request, validate, retries=retries)
        except JSON_VALIDATION_ERRORS as exc:
            raise AnnotationError(f"bloom annotation failed: {exc}") from exc
        annotated.extend(
            replace(q, bloom=label) for q, label in zip(batch, labels)
        )
    return annotated


def align_exam_to_sections(
    chapter: Chapter,
    gateway: Gateway,
    model_id: str,
    seed: int | None = None,
    retries: int = 3,
) -> tuple[Chapter, list[str]]:
    """Populate aligned_sections; out-of-range indices from the LM are dropped
    with a warning record rather than retried."""
    questions = chapter.exam.questions
    prompt = render_alignment_prompt(chapter.sections, questions)
    request = user_request(
        model_id,
        prompt,
        temperature=0.0,
        seed=seed if seed is not None else derive_seed("align", chapter.id),
        max_tokens=2048,
    )

    def validate(parsed: Any) -> dict[int, list[int]]:
        entries = parsed["alignments"]
        mapping: dict[int, list[int]] = {}
        for entry in entries:
            qnum = int(entry["question"])
            sections = entry["sections"]
            if not isinstance(sections, list):
                raise ValueError("sections must be a list")
            mapping[qnum] = [int(s) for s in sections]
        return mapping

    mapping = request_json(gateway, request, validate, retries=retries)
    valid = set(chapter.section_indices())
    warnings: list[str] = []
    updated: list[ExamQuestion] = []
    for i, question in enumerate(questions, start=1):
        proposed = mapping.get(i, [])
        kept = sorted({k for k in proposed if k in valid})
        dropped = sorted(set(proposed) - valid)
        if dropped:
            warnings.append(
                f"{chapter.id}/{question.id}: dropped out-of-range sections {dropped}"
            )
        updated.append(replace(question, aligned_sections=tuple(kept)))
    new_chapter = replace(chapter, exam=Exam(questions=tuple(updated)))
    return new_chapter, warnings


# -- split and stats -----------------------------------------------------------


def split_train_test(chapters: Sequence[Chapter]) -> list[Chapter]:
    """First 20 chapters per subject (curriculum order) train, next 5 test,
    surplus unassigned. Fewer than 25 curated chapters is an error."""
    by_subject: dict[str, list[Chapter]] = {}
    for chapter in chapters:
        by_subject.setdefault(chapter.subject, []).append(chapter)
    out: list[Chapter] = []
    for subject in sorted(by_subject):
        ordered = sorted(by_subject[subject], key=lambda c: c.ordinal)
        if len(ordered) < TRAIN_CHAPTERS + TEST_CHAPTERS:
            raise SplitError(subject, len(ordered))
        for position, chapter in enumerate(ordered):
            if position < TRAIN_CHAPTERS:
                split = Split.TRAIN
            elif position < TRAIN_CHAPTERS + TEST_CHAPTERS:
                split = Split.TEST
            else:
                split = Split.UNASSIGNED
            out.append(chapter.with_split(split))
    return sorted(out, key=lambda c: (c.subject, c.ordinal))


def corpus_stats(chapters: Iterable[Chapter]) -> CorpusStats:
    groups: dict[tuple[str, Split], list[Chapter]] = {}
    for chapter in chapters:
        groups.setdefault((chapter.subject, chapter.split), []).append(chapter)
    rows: list[CorpusStatsRow] = []
    for (subject, split), members in sorted(
        groups.items(), key=lambda kv: (kv[0][0], _SPLIT_ORDER[kv[0][1]])
    ):
        question_counts = [len(c.exam.questions) for c in members]
        total_questions = sum(question_counts)
        with_answer = sum(
            1 for c in members for q in c.exam.questions if q.reference_answer
        )
        section_lengths = [len(s.content) for c in members for s in c.sections]
        rows.append(
            CorpusStatsRow(
                subject=subject,
                split=split.value,
                chapter_count=len(members),
                mean_exam_per_chapter=total_questions / len(members),
                pct_with_reference_answer=(
                    100.0 * with_answer / total_questions if total_questions else 0.0
                ),
                mean_sections_per_chapter=sum(len(c.sections) for c in members)
                / len(members),
                section_length_mean=(
                    statistics.fmean(section_lengths) if section_lengths else 0.0
                ),
                section_length_variance=(
                    statistics.pvariance(section_lengths)
                    if len(section_lengths) > 1
                    else 0.0
                ),
            )
        )
    return CorpusStats(rows=tuple(rows))


def write_stats_csv(stats: CorpusStats, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "subject",
                "split",
                "chapters",
                "mean_exam_questions_per_chapter",
                "pct_exam_with_reference_answer",
                "mean_sections_per_chapter",
            ]
        )
        for row in stats.rows:
            writer.writerow(
                [
                    row.subject,
                    row.split,
                    row.chapter_count,
                    f"{row.mean_exam_per_chapter:.1f}",
                    f"{row.pct_with_reference_answer:.0f}%",
                    f"{row.mean_sections_per_chapter:.1f}",
                ]
            )


# -- per-chapter pipeline --------------------------------------------------------


def curate_chapter(
    raw: RawChapterFile,
    gateway: Gateway,
    model_id: str,
    segmentation_model_id: str | None = None,
    example_input: str | None = None,
    example_output: str | None = None,
    retries: int = 3,
) -> tuple[Chapter, list[str]]:
    """Run segment -> extract -> annotate -> align for one chapter.

    Raises :class:`ChapterRejected` when the exam is too small; the caller
    records it and moves on.
    """
    sections = segment_sections(
        raw,
        gateway,
        segmentation_model_id or model_id,
        example_input=example_input,
        example_output=example_output,
        retries=retries,
    )
    questions = extract_exam(raw)
    questions = classify_bloom(
        questions, gateway, model_id, seed=derive_seed("bloom", raw.chapter_id),
        retries=retries,
    )
    chapter = Chapter(
        id=raw.chapter_id,
        subject=raw.subject,
        title=raw.slug.replace("-", " ").replace("_", " "),
        sections=tuple(sections),
        exam=Exam(questions=tuple(questions)),
        ordinal=raw.ordinal,
    )
    return align_exam_to_sections(chapter, gateway, model_id, retries=retries)
