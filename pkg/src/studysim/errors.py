"""Exception taxonomy shared by every module.

Errors are grouped roughly by pipeline stage; all inherit from
:class:`StudySimError` so callers can catch one base type.
"""

from __future__ import annotations


class StudySimError(Exception):
    """Base class for all errors raised by this package."""


# -- domain ----------------------------------------------------------------

class EmptyExamError(StudySimError):
    pass


class InvalidScoreError(StudySimError):
    pass


# -- gateway ---------------------------------------------------------------

class RetryableError(StudySimError):
    """Transient backend failure (network, timeout, 429/5xx)."""


class FatalError(StudySimError):
    """Non-retryable backend failure (4xx, misconfiguration)."""


class CacheError(StudySimError):
    pass


class ParseError(StudySimError):
    """No balanced JSON object could be located in the raw text."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class InvalidInputError(StudySimError):
    pass


# -- corpus ----------------------------------------------------------------

class SegmentationError(StudySimError):
    pass


class ChapterRejected(StudySimError):
    """Typed curation outcome for chapters with too few usable exam questions.

    Raised and caught as control flow, never surfaced as a crash.
    """

    def __init__(self, count: int, chapter: str = ""):
        super().__init__(f"chapter rejected: {count} usable exam questions (< 10)")
        self.count = count
        self.chapter = chapter


class AnnotationError(StudySimError):
    pass


class SplitError(StudySimError):
    def __init__(self, subject: str, count: int):
        super().__init__(f"subject {subject!r} has {count} curated chapters, need >= 25")
        self.subject = subject
        self.count = count


class LayoutError(StudySimError):
    pass


# -- generation ------------------------------------------------------------

class GenerationError(StudySimError):
    pass


class ExemplarError(StudySimError):
    pass


class AnswerError(StudySimError):
    pass


# -- simulation ------------------------------------------------------------

class SimulationError(StudySimError):
    pass


class ScoringError(StudySimError):
    pass


class EmptyStudySetError(StudySimError):
    pass


# -- metrics ---------------------------------------------------------------

class MetricError(StudySimError):
    pass


class InvalidDistributionError(StudySimError):
    pass


class MetricUnavailableError(StudySimError):
    pass


class StatError(StudySimError):
    pass


# -- export / orchestration ------------------------------------------------

class EmptyDatasetError(StudySimError):
    pass


class ConfigError(StudySimError):
    pass


class DependencyError(StudySimError):
    def __init__(self, stage: str, detail: str = ""):
        msg = f"missing or stale output from stage {stage!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.stage = stage
