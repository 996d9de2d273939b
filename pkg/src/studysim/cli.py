"""Command-line orchestrator: reproducible stages with manifests and caching.

Stage outputs are immutable; every invocation writes a fresh run directory
under the runs root and records input/output hashes in a deterministic
manifest. Exit codes: 0 success, 2 validation, 3 missing upstream
dependency, 4 backend failure.
"""

from __future__ import annotations

import functools
import logging
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import click

from . import report as report_mod
from .config import AppConfig
from .corpus import (
    corpus_stats,
    curate_chapter,
    discover_corpus,
    split_train_test,
    write_stats_csv,
)
from .corpus import CorpusStats, CorpusStatsRow, classify_bloom
from .domain import (
    Bloom,
    Chapter,
    ExamQuestion,
    Split,
    UtilityRecord,
    utility_record_from_dict,
    utility_record_to_dict,
    validate_chapter,
)
from .errors import (
    ChapterRejected,
    ConfigError,
    DependencyError,
    EmptyDatasetError,
    FatalError,
    RetryableError,
    StudySimError,
)
from .finetune import (
    build_finetune_examples,
    emit_finetune_jsonl,
    filter_by_utility,
    submit_finetune,
)
from .gateway import Gateway, MockBackend, MockScript, OpenAIBackend, ResponseCache
from .gateway.core import RetryPolicy, TokenBucket
from .generation import (
    BloomSampler,
    GenerationRecord,
    Strategy,
    bloom_counts,
    exemplar_pool,
    generate_chapter_pairs,
    sample_exemplars,
)
from .manifest import (
    RunManifest,
    allocate_run_dir,
    derive_run_id,
    require_artifact,
    tree_sha256,
    write_accounting,
    write_manifest,
)
from .metrics import (
    eig,
    first_token,
    bloom_depth,
    salience,
    similarity_to_exam,
    spearman,
)
from .errors import InvalidInputError, MetricUnavailableError, StatError
from .simulator import EMPTY_STUDY_SET, ExamSimulator, StudySet
from .storage import (
    load_chapters,
    read_json,
    read_jsonl,
    save_chapters,
    write_json,
    write_jsonl,
)
from .util import derive_seed, file_sha256
from .utility import estimate_utilities, simulate_with

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 2
EXIT_DEPENDENCY = 3
EXIT_BACKEND = 4


@dataclass
class AppContext:
    config: AppConfig
    runs_root: Path


@dataclass
class Stage:
    app: AppContext
    command: str
    run_dir: Path
    run_id: str
    backend_identity: str
    inputs: dict[str, str]
    gateway: Gateway | None
    backend: Any
    started: float

    def finish(self, output_names: Sequence[str], **extra_accounting: Any) -> None:
        outputs = {
            name: tree_sha256(self.run_dir / name)
            for name in output_names
            if (self.run_dir / name).exists()
        }
        request_count = 0
        backend_calls = 0
        cache_hits = 0
        if self.gateway is not None:
            backend_calls = self.gateway.backend_calls
            cache_hits = self.gateway.cache_hits
            request_count = backend_calls + cache_hits
        manifest = RunManifest(
            run_id=self.run_id,
            command=self.command,
            config=self.app.config.snapshot(),
            backend=self.backend_identity,
            seed=self.app.config.seed,
            inputs=self.inputs,
            outputs=outputs,
            request_count=request_count,
        )
        write_manifest(self.run_dir, manifest)
        write_accounting(
            self.run_dir,
            wall_clock_s=time.monotonic() - self.started,
            backend_calls=backend_calls,
            cache_hits=cache_hits,
            **extra_accounting,
        )
        click.echo(f"[{self.command}] {self.run_dir}")


def _backend_identity(config: AppConfig) -> str:
    spec = config.backend
    if not spec:
        raise ConfigError("no backend configured; pass --backend mock:<script.json> or openai")
    if spec.startswith("mock:"):
        script_path = Path(spec[len("mock:") :])
        if not script_path.is_file():
            raise ConfigError(f"mock script {script_path} does not exist")
        return f"mock:{file_sha256(script_path)[:12]}"
    if spec == "openai":
        return f"http:{config.resolved_base_url()}"
    raise ConfigError(f"unknown backend {spec!r}")


def _build_backend(config: AppConfig):
    spec = config.backend or ""
    if spec.startswith("mock:"):
        script_path = Path(spec[len("mock:") :])
        return MockBackend(
            MockScript.from_file(script_path), script_digest=file_sha256(script_path)
        )
    return OpenAIBackend(
        base_url=config.resolved_base_url(),
        api_key=config.api_key(),
        embedding_model=config.embedding_model_id,
    )


def begin_stage(
    app: AppContext,
    command: str,
    inputs: dict[str, str],
    needs_gateway: bool = True,
) -> Stage:
    identity = _backend_identity(app.config) if needs_gateway else "none"
    run_id = derive_run_id(command, app.config.snapshot(), identity, app.config.seed, inputs)
    run_dir = allocate_run_dir(app.runs_root, command, run_id)
    gateway = None
    backend = None
    if needs_gateway:
        backend = _build_backend(app.config)
        limiter = None
        if not isinstance(backend, MockBackend):
            limiter = TokenBucket(app.config.rate_limit_per_minute)
        cache = ResponseCache(
            global_dir=app.runs_root / "cache",
            run_log_path=run_dir / "cache" / "requests.jsonl",
        )
        gateway = Gateway(
            backend,
            cache=cache,
            rate_limiter=limiter,
            retry=RetryPolicy(
                max_attempts=app.config.retry_max_attempts,
                backoff_base=app.config.retry_backoff_base,
            ),
        )
    return Stage(
        app=app,
        command=command,
        run_dir=run_dir,
        run_id=run_id,
        backend_identity=identity,
        inputs=inputs,
        gateway=gateway,
        backend=backend,
        started=time.monotonic(),
    )


def cli_stage(fn: Callable) -> Callable:
    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any):
        try:
            return fn(*args, **kwargs)
        except DependencyError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DEPENDENCY)
        except (FatalError, RetryableError) as exc:
            click.echo(f"backend error: {exc}", err=True)
            sys.exit(EXIT_BACKEND)
        except StudySimError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)

    return wrapper


def _pool_map(workers: int, fn: Callable, items: Sequence[Any]) -> list[Any]:
    """Apply fn across items on a bounded pool; results in input order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _chapters_for_split(chapters: Sequence[Chapter], split: str) -> list[Chapter]:
    if split == "all":
        return list(chapters)
    wanted = Split(split.capitalize())
    return [c for c in chapters if c.split is wanted]


# -- strategy support ---------------------------------------------------------


@dataclass
class StrategyKit:
    """Per-run strategy inputs: fixed exemplars and level distributions."""

    strategy: Strategy
    model_id: str
    exemplars_by_subject: dict[str, list[tuple[str, str]]]
    bloom_by_subject: dict[str, dict[Bloom, float]]
    seed: int

    def exemplars_for(self, subject: str) -> list[tuple[str, str]] | None:
        if self.strategy is not Strategy.FEW_SHOT:
            return None
        if subject not in self.exemplars_by_subject:
            raise ConfigError(f"no aligned train exemplars for subject {subject!r}")
        return self.exemplars_by_subject[subject]

    def sampler_for(self, chapter: Chapter, trial: int) -> BloomSampler | None:
        if self.strategy is not Strategy.BLOOM_BASED:
            return None
        dist = self.bloom_by_subject.get(chapter.subject)
        if not dist:
            raise ConfigError(f"no train-split Bloom labels for subject {chapter.subject!r}")
        # Per-chapter seeded stream: draw order stays deterministic even
        # when chapters run on different workers.
        return BloomSampler(dist, derive_seed(self.seed, "bloom-sampler", chapter.id, trial))


def build_strategy_kit(
    app: AppContext,
    strategy: Strategy,
    all_chapters: Sequence[Chapter],
    model_id: str | None,
) -> StrategyKit:
    config = app.config
    resolved_model = config.model_id
    if strategy is Strategy.FINE_TUNED:
        if not model_id:
            raise ConfigError("--model-id is required for the fine_tuned strategy")
        resolved_model = model_id
    exemplars: dict[str, list[tuple[str, str]]] = {}
    blooms: dict[str, dict[Bloom, float]] = {}
    subjects = sorted({c.subject for c in all_chapters})
    if strategy is Strategy.FEW_SHOT:
        for subject in subjects:
            pool = exemplar_pool(c for c in all_chapters if c.subject == subject)
            if len(pool) >= config.few_shot_k:
                exemplars[subject] = sample_exemplars(
                    pool, derive_seed(config.seed, "exemplars", subject), config.few_shot_k
                )
    if strategy is Strategy.BLOOM_BASED:
        for subject in subjects:
            counts = bloom_counts(c for c in all_chapters if c.subject == subject)
            total = sum(counts.values())
            if total:
                blooms[subject] = {b: n / total for b, n in counts.items()}
    return StrategyKit(
        strategy=strategy,
        model_id=resolved_model,
        exemplars_by_subject=exemplars,
        bloom_by_subject=blooms,
        seed=config.seed,
    )


def _generate_for_chapter(
    app: AppContext,
    gateway: Gateway,
    kit: StrategyKit,
    chapter: Chapter,
    trials: int,
) -> list[GenerationRecord]:
    config = app.config
    records: list[GenerationRecord] = []
    for trial in range(trials):
        records.extend(
            generate_chapter_pairs(
                chapter,
                kit.strategy,
                gateway,
                kit.model_id,
                trial=trial,
                temperature=config.generation_temperature,
                answer_temperature=config.answer_temperature,
                context_budget_chars=config.context_budget_chars,
                exemplars=kit.exemplars_for(chapter.subject),
                sampler=kit.sampler_for(chapter, trial),
                retries=config.json_retries,
            )
        )
    return records


def _make_simulator(
    app: AppContext, gateway: Gateway, chapter: Chapter, persist_dir: Path | None
) -> ExamSimulator:
    config = app.config
    return ExamSimulator(
        gateway,
        chapter,
        learner_model_id=config.model_id,
        evaluator_model_id=config.model_id,
        temperature=config.judge_temperature,
        context_budget_chars=config.context_budget_chars,
        retries=config.json_retries,
        persist_dir=persist_dir,
    )


def _record_sort_key(record: GenerationRecord) -> tuple:
    return (
        record.subject,
        record.chapter_ordinal,
        record.qa.generator.trial,
        record.qa.anchor_section,
        record.qa.id,
    )


# -- CLI ------------------------------------------------------------------------


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--backend", default=None, help="mock:<script.json> or openai")
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option(
    "--runs-root",
    type=click.Path(path_type=Path),
    default=Path("runs"),
    show_default=True,
)
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config_path, backend, seed, workers, runs_root, verbose):
    """Question-utility pipeline: simulate learners, estimate utility, filter."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = AppConfig.load(
            config_path, overrides={"backend": backend, "seed": seed, "workers": workers}
        )
    except StudySimError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)
    ctx.obj = AppContext(config=config, runs_root=Path(runs_root))


@main.command()
@click.option("--corpus-dir", type=click.Path(path_type=Path), required=True)
@click.pass_obj
@cli_stage
def ingest(app: AppContext, corpus_dir: Path):
    """Curate raw chapter files: section, extract exams, annotate, align, split."""
    config = app.config
    raws = discover_corpus(corpus_dir)
    stage = begin_stage(app, "ingest", inputs={"corpus": tree_sha256(corpus_dir)})
    gateway = stage.gateway
    assert gateway is not None

    rejected: list[dict[str, Any]] = []
    warnings: list[str] = []

    def work(raw):
        try:
            chapter, chapter_warnings = curate_chapter(
                raw,
                gateway,
                config.model_id,
                segmentation_model_id=config.resolve_segmentation_model(),
                retries=config.json_retries,
            )
            return ("ok", chapter, chapter_warnings)
        except ChapterRejected as exc:
            return ("rejected", raw.chapter_id, exc.count)

    results = _pool_map(config.workers, work, raws)
    curated: list[Chapter] = []
    for result in results:
        if result[0] == "ok":
            curated.append(result[1])
            warnings.extend(result[2])
        else:
            rejected.append({"chapter_id": result[1], "usable_questions": result[2]})
            click.echo(f"rejected {result[1]}: {result[2]} usable exam questions (< 10)")

    chapters = split_train_test(curated)
    violations = [
        f"{chapter.id}: {violation}"
        for chapter in chapters
        for violation in validate_chapter(chapter, curated=True)
    ]
    if violations:
        for line in violations:
            click.echo(f"invalid chapter: {line}", err=True)
        sys.exit(EXIT_VALIDATION)

    save_chapters(stage.run_dir / "chapters", chapters)
    stats = corpus_stats(chapters)
    write_json(stage.run_dir / "corpus_stats.json", {"rows": stats.to_dicts()})
    write_stats_csv(stats, stage.run_dir / "corpus_stats.csv")
    write_json(stage.run_dir / "rejected.json", sorted(rejected, key=lambda r: r["chapter_id"]))
    write_json(stage.run_dir / "warnings.json", sorted(warnings))

    for row in stats.rows:
        click.echo(
            f"{row.subject:<14} {row.split:<10} chapters={row.chapter_count:<3} "
            f"exam/ch={row.mean_exam_per_chapter:.1f} "
            f"w/answer={row.pct_with_reference_answer:.0f}% "
            f"sections/ch={row.mean_sections_per_chapter:.1f}"
        )
    stage.finish(
        ["chapters", "corpus_stats.json", "corpus_stats.csv", "rejected.json", "warnings.json"],
        rejected_chapters=len(rejected),
    )


def _load_chapter_artifact(run_dir: Path) -> tuple[list[Chapter], str]:
    path = require_artifact(run_dir, "chapters", stage="ingest")
    return load_chapters(path), tree_sha256(path)


@main.command()
@click.option("--chapters", "chapters_run", type=click.Path(exists=True, path_type=Path), required=True)
@click.option(
    "--strategy",
    type=click.Choice([s.value for s in Strategy]),
    default=Strategy.ZERO_SHOT.value,
    show_default=True,
)
@click.option("--trials", type=int, default=None, help="generation trials per chapter")
@click.option("--split", type=click.Choice(["train", "test", "all"]), default="train", show_default=True)
@click.option("--model-id", default=None, help="generator model for fine_tuned passthrough")
@click.pass_obj
@cli_stage
def generate(app: AppContext, chapters_run: Path, strategy: str, trials: int | None,
             split: str, model_id: str | None):
    """Generate one question per section plus independent answers."""
    config = app.config
    trials = trials if trials is not None else config.trials
    all_chapters, chapters_hash = _load_chapter_artifact(chapters_run)
    selected = _chapters_for_split(all_chapters, split)
    if not selected:
        raise ConfigError(f"no chapters in split {split!r}")
    kit = build_strategy_kit(app, Strategy(strategy), all_chapters, model_id)
    stage = begin_stage(
        app, "generate",
        inputs={"chapters": chapters_hash, "strategy": strategy, "split": split,
                "trials": str(trials)},
    )
    gateway = stage.gateway
    assert gateway is not None

    results = _pool_map(
        config.workers,
        lambda chapter: _generate_for_chapter(app, gateway, kit, chapter, trials),
        selected,
    )
    records = sorted((r for group in results for r in group), key=_record_sort_key)
    write_jsonl(stage.run_dir / "generated.jsonl", (r.to_dict() for r in records))
    by_subject: dict[str, int] = {}
    for record in records:
        by_subject[record.subject] = by_subject.get(record.subject, 0) + 1
    write_json(
        stage.run_dir / "generation_summary.json",
        {"strategy": strategy, "trials": trials, "pairs_by_subject": by_subject},
    )
    click.echo(f"generated {len(records)} QA pairs across {len(selected)} chapters")
    stage.finish(["generated.jsonl", "generation_summary.json"])


@main.command()
@click.option("--chapters", "chapters_run", type=click.Path(exists=True, path_type=Path), required=True)
@click.option(
    "--strategy",
    type=click.Choice([s.value for s in Strategy]),
    default=Strategy.ZERO_SHOT.value,
    show_default=True,
)
@click.option("--trials", type=int, default=None)
@click.option("--split", type=click.Choice(["train", "test", "all"]), default="test", show_default=True)
@click.option("--model-id", default=None)
@click.pass_obj
@cli_stage
def run(app: AppContext, chapters_run: Path, strategy: str, trials: int | None,
        split: str, model_id: str | None):
    """Exam-score evaluation: per-subject mean score with gain over no-study."""
    config = app.config
    trials = trials if trials is not None else config.trials
    all_chapters, chapters_hash = _load_chapter_artifact(chapters_run)
    selected = _chapters_for_split(all_chapters, split)
    if not selected:
        raise ConfigError(f"no chapters in split {split!r}")
    kit = build_strategy_kit(app, Strategy(strategy), all_chapters, model_id)
    stage = begin_stage(
        app, "run",
        inputs={"chapters": chapters_hash, "strategy": strategy, "split": split,
                "trials": str(trials)},
    )
    gateway = stage.gateway
    assert gateway is not None
    attempts_dir = stage.run_dir / "attempts"

    def work(chapter: Chapter) -> dict[str, Any]:
        sim = _make_simulator(app, gateway, chapter, attempts_dir)
        base_seed = derive_seed(config.seed, "run-sim", chapter.id)
        no_study = sim.simulate(EMPTY_STUDY_SET, trials, base_seed).mean
        trial_scores = []
        for trial in range(trials):
            # Each trial re-runs generation end to end; the trial index keeps
            # provenance and seeds distinct between trials.
            chapter_records = generate_chapter_pairs(
                chapter,
                kit.strategy,
                gateway,
                kit.model_id,
                trial=trial,
                temperature=config.generation_temperature,
                answer_temperature=config.answer_temperature,
                context_budget_chars=config.context_budget_chars,
                exemplars=kit.exemplars_for(chapter.subject),
                sampler=kit.sampler_for(chapter, trial),
                retries=config.json_retries,
            )
            study = StudySet.of(r.qa for r in chapter_records)
            trial_scores.append(sim.simulate(study, 1, base_seed + trial).mean)
        return {
            "chapter_id": chapter.id,
            "subject": chapter.subject,
            "no_study": no_study,
            "score": sum(trial_scores) / len(trial_scores),
        }

    rows = _pool_map(config.workers, work, selected)
    rows.sort(key=lambda r: (r["subject"], r["chapter_id"]))
    subjects = []
    for subject in sorted({r["subject"] for r in rows}):
        mine = [r for r in rows if r["subject"] == subject]
        score = statistics.fmean(r["score"] for r in mine)
        baseline = statistics.fmean(r["no_study"] for r in mine)
        subjects.append(
            {
                "subject": subject,
                "no_study": baseline,
                "score": score,
                "gain": score - baseline,
                "cell": report_mod.format_gain_cell(score, baseline),
                "chapters": mine,
            }
        )
    scores = {"strategy": strategy, "trials": trials, "split": split, "subjects": subjects}
    write_json(stage.run_dir / "scores.json", scores)
    report_mod.write_scores_table(scores, stage.run_dir)
    for row in subjects:
        click.echo(f"{row['subject']:<14} {row['cell']}")
    stage.finish(["scores.json", "exam_scores.csv", "exam_scores.txt", "attempts"])


@main.command()
@click.option("--chapters", "chapters_run", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--generated", "generated_run", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--trials", type=int, default=None, help="simulation trials per study set")
@click.pass_obj
@cli_stage
def utility(app: AppContext, chapters_run: Path, generated_run: Path, trials: int | None):
    """Estimate per-pair utility from the two study-set perturbations."""
    config = app.config
    trials = trials if trials is not None else config.trials
    all_chapters, chapters_hash = _load_chapter_artifact(chapters_run)
    generated_path = require_artifact(generated_run, "generated.jsonl", stage="generate")
    records = [GenerationRecord.from_dict(d) for d in read_jsonl(generated_path)]
    if not records:
        raise ConfigError("generated.jsonl holds no records")
    stage = begin_stage(
        app, "utility",
        inputs={"chapters": chapters_hash, "generated": tree_sha256(generated_path),
                "trials": str(trials)},
    )
    gateway = stage.gateway
    assert gateway is not None
    attempts_dir = stage.run_dir / "attempts"
    chapters_by_id = {c.id: c for c in all_chapters}

    groups: dict[tuple[str, int], list[GenerationRecord]] = {}
    for record in records:
        groups.setdefault((record.chapter_id, record.qa.generator.trial), []).append(record)

    def work(key: tuple[str, int]) -> list[dict[str, Any]]:
        chapter_id, trial = key
        group = groups[key]
        chapter = chapters_by_id.get(chapter_id)
        if chapter is None:
            raise DependencyError("ingest", f"chapter {chapter_id} not in chapters artifact")
        sim = _make_simulator(app, gateway, chapter, attempts_dir)
        base_seed = derive_seed(config.seed, "utility-sim", chapter_id, trial)
        pairs = [r.qa for r in group]
        estimates = estimate_utilities(pairs, simulate_with(sim, trials, base_seed))
        rows = []
        for record, estimate in zip(group, estimates):
            row = utility_record_to_dict(estimate)
            row.update(
                {
                    "chapter_id": chapter_id,
                    "subject": record.subject,
                    "chapter_ordinal": record.chapter_ordinal,
                    "trial": trial,
                    "trials": trials,
                }
            )
            rows.append(row)
        return rows

    keys = sorted(groups)
    results = _pool_map(config.workers, work, keys)
    rows = [row for group_rows in results for row in group_rows]
    rows.sort(key=lambda r: (r["subject"], r["chapter_ordinal"], r["trial"], r["qa_id"]))
    write_jsonl(stage.run_dir / "utilities.jsonl", rows)
    with open(stage.run_dir / "utilities.csv", "w", encoding="utf-8") as fh:
        fh.write("qa_id,utility,s_empty,s_full,s_single,s_all_but_one\n")
        for row in rows:
            fh.write(
                f"{row['qa_id']},{row['utility']:.6f},{row['s_empty']:.6f},"
                f"{row['s_full']:.6f},{row['s_single']:.6f},{row['s_all_but_one']:.6f}\n"
            )
    click.echo(f"estimated utility for {len(rows)} pairs")
    stage.finish(["utilities.jsonl", "utilities.csv", "attempts"])


@main.command()
@click.option("--chapters", "chapters_run", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--generated", "generated_run", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--utilities", "utilities_run", type=click.Path(exists=True, path_type=Path), required=True)
@click.pass_obj
@cli_stage
def metrics(app: AppContext, chapters_run: Path, generated_run: Path, utilities_run: Path):
    """Indirect metrics per pair plus the three-pair correlation table."""
    config = app.config
    all_chapters, chapters_hash = _load_chapter_artifact(chapters_run)
    generated_path = require_artifact(generated_run, "generated.jsonl", stage="generate")
    utilities_path = require_artifact(utilities_run, "utilities.jsonl", stage="utility")
    records = [GenerationRecord.from_dict(d) for d in read_jsonl(generated_path)]
    utility_by_id = {row["qa_id"]: row["utility"] for row in read_jsonl(utilities_path)}
    stage = begin_stage(
        app, "metrics",
        inputs={
            "chapters": chapters_hash,
            "generated": tree_sha256(generated_path),
            "utilities": tree_sha256(utilities_path),
        },
    )
    gateway = stage.gateway
    assert gateway is not None
    chapters_by_id = {c.id: c for c in all_chapters}

    by_chapter: dict[str, list[GenerationRecord]] = {}
    for record in records:
        by_chapter.setdefault(record.chapter_id, []).append(record)

    def context_for(chapter: Chapter, anchor_index: int) -> str:
        parts = [s.content for s in chapter.sections if s.index <= anchor_index]
        text = "\n\n".join(parts)
        # Same left-truncation rule as generation: oldest content drops first.
        while len(parts) > 1 and len(text) > config.context_budget_chars:
            parts.pop(0)
            text = "\n\n".join(parts)
        return text

    def work(chapter_id: str) -> list[dict[str, Any]]:
        group = sorted(by_chapter[chapter_id], key=_record_sort_key)
        chapter = chapters_by_id.get(chapter_id)
        if chapter is None:
            raise DependencyError("ingest", f"chapter {chapter_id} not in chapters artifact")
        stubs = [
            ExamQuestion(id=f"g{i:03d}", text=record.qa.question)
            for i, record in enumerate(group, start=1)
        ]
        classified = classify_bloom(
            stubs, gateway, config.model_id,
            seed=derive_seed(config.seed, "metrics-bloom", chapter_id),
            retries=config.json_retries,
        )
        rows = []
        for record, stub in zip(group, classified):
            context = context_for(chapter, record.qa.anchor_section)
            sal = salience(
                record.qa.question, context, gateway, config.model_id,
                seed=derive_seed(config.seed, "salience", record.qa.id),
                retries=config.json_retries,
            )
            eig_value: float | None
            try:
                eig_value = eig(
                    record.qa.question,
                    context,
                    first_token(record.qa.answer),
                    gateway,
                    config.model_id,
                    seed=derive_seed(config.seed, "eig", record.qa.id),
                    top_k_logprobs=config.top_k_logprobs,
                ).eig
            except (MetricUnavailableError, InvalidInputError) as exc:
                logger.warning("eig unavailable for %s: %s", record.qa.id, exc)
                eig_value = None
            similarity = similarity_to_exam(
                record.qa.question, chapter.exam, gateway, config.embedding_model_id
            )
            rows.append(
                {
                    "qa_id": record.qa.id,
                    "chapter_id": chapter_id,
                    "subject": record.subject,
                    "chapter_ordinal": record.chapter_ordinal,
                    "trial": record.qa.generator.trial,
                    "utility": utility_by_id.get(record.qa.id),
                    "salience": sal.value,
                    "eig": eig_value,
                    "max_cosine": similarity.max_cosine,
                    "max_rouge_l": similarity.max_rouge_l,
                    "bloom_depth": bloom_depth(stub.bloom) if stub.bloom else None,
                }
            )
        return rows

    chapter_ids = sorted(by_chapter)
    results = _pool_map(config.workers, work, chapter_ids)
    rows = [row for group_rows in results for row in group_rows]
    rows.sort(key=lambda r: (r["subject"], r["chapter_ordinal"], r["trial"], r["qa_id"]))
    write_jsonl(stage.run_dir / "metrics.jsonl", rows)

    def correlation_entry(name_x: str, name_y: str) -> dict[str, Any]:
        paired = [
            (row[name_x], row[name_y])
            for row in rows
            if row.get(name_x) is not None and row.get(name_y) is not None
        ]
        entry: dict[str, Any] = {"metric1": name_x, "metric2": name_y, "n": len(paired)}
        try:
            result = spearman([p[0] for p in paired], [p[1] for p in paired])
            entry.update({"rho": result.rho, "p_value": result.p_value})
        except StatError as exc:
            logger.warning("correlation %s/%s undefined: %s", name_x, name_y, exc)
            entry.update({"rho": None, "p_value": None})
        return entry

    correlations = [
        correlation_entry("utility", "salience"),
        correlation_entry("utility", "eig"),
        correlation_entry("salience", "eig"),
    ]
    write_json(stage.run_dir / "correlations.json", {"correlations": correlations})
    for entry in correlations:
        rho = "n/a" if entry.get("rho") is None else f"{entry['rho']:+.3f}"
        click.echo(f"{entry['metric1']} vs {entry['metric2']}: rho={rho} (n={entry['n']})")
    stage.finish(["metrics.jsonl", "correlations.json"])


def _parse_thetas(raw: str) -> list[float]:
    try:
        return [float(part) for part in raw.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad theta sweep {raw!r}: {exc}") from exc


@main.command(name="filter")
@click.option("--utilities", "utilities_run", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--theta", type=float, default=None, help="acceptance threshold (inclusive)")
@click.option("--sweep", default=None, help="comma-separated thresholds, e.g. 0,0.05,0.1")
@click.option("--generated", "generated_run", type=click.Path(exists=True, path_type=Path),
              default=None, help="needed with --sweep to emit per-threshold datasets")
@click.pass_obj
@cli_stage
def filter_cmd(app: AppContext, utilities_run: Path, theta: float | None,
               sweep: str | None, generated_run: Path | None):
    """Rejection-sampling filter: keep pairs whose utility clears the threshold."""
    config = app.config
    theta = theta if theta is not None else config.theta
    utilities_path = require_artifact(utilities_run, "utilities.jsonl", stage="utility")
    rows = read_jsonl(utilities_path)
    records = [utility_record_from_dict(row) for row in rows]
    inputs = {"utilities": tree_sha256(utilities_path), "theta": f"{theta}", "sweep": sweep or ""}
    generation_records: list[GenerationRecord] | None = None
    if generated_run is not None:
        generated_path = require_artifact(generated_run, "generated.jsonl", stage="generate")
        generation_records = [GenerationRecord.from_dict(d) for d in read_jsonl(generated_path)]
        inputs["generated"] = tree_sha256(generated_path)
    stage = begin_stage(app, "filter", inputs=inputs, needs_gateway=False)

    if sweep is None:
        result = filter_by_utility(records, theta)
        write_json(
            stage.run_dir / "accepted.json",
            {
                "theta": result.theta,
                "accepted_ids": list(result.accepted_ids),
                "accepted_count": result.accepted_count,
                "rejected_count": result.rejected_count,
            },
        )
        click.echo(
            f"theta={theta}: accepted {result.accepted_count}, "
            f"rejected {result.rejected_count}"
        )
        stage.finish(["accepted.json"])
        return

    thetas = _parse_thetas(sweep)
    sweep_rows = []
    for value in thetas:
        result = filter_by_utility(records, value)
        dataset_name = ""
        if generation_records is not None and result.accepted_count > 0:
            examples = build_finetune_examples(generation_records, result.accepted_ids)
            dataset_name = f"datasets/theta_{value:.2f}.jsonl"
            emit_finetune_jsonl(examples, stage.run_dir / dataset_name)
        sweep_rows.append(
            {
                "theta": value,
                "accepted_count": result.accepted_count,
                "rejected_count": result.rejected_count,
                "dataset": dataset_name,
            }
        )
        click.echo(f"theta={value:.2f}: accepted {result.accepted_count}")
    with open(stage.run_dir / "sweep.csv", "w", encoding="utf-8") as fh:
        fh.write("theta,accepted_count,rejected_count,dataset\n")
        for row in sweep_rows:
            fh.write(
                f"{row['theta']},{row['accepted_count']},{row['rejected_count']},"
                f"{row['dataset']}\n"
            )
    write_json(stage.run_dir / "sweep.json", {"rows": sweep_rows})
    outputs = ["sweep.csv", "sweep.json"]
    if any(row["dataset"] for row in sweep_rows):
        outputs.append("datasets")
    stage.finish(outputs)


@main.command(name="emit-finetune")
@click.option("--source", type=click.Choice(["accepted", "sft"]), default="accepted",
              show_default=True,
              help="accepted: utility-filtered pairs; sft: aligned exam questions")
@click.option("--filter", "filter_run", type=click.Path(exists=True, path_type=Path),
              default=None, help="filter run (required for --source accepted)")
@click.option("--generated", "generated_run", type=click.Path(exists=True, path_type=Path),
              default=None, help="generate run (required for --source accepted)")
@click.option("--chapters", "chapters_run", type=click.Path(exists=True, path_type=Path),
              default=None, help="ingest run (required for --source sft)")
@click.option("--mode", type=click.Choice(["subject", "cross"]), default="cross", show_default=True)
@click.option("--submit", is_flag=True, help="upload and create a fine-tuning job")
@click.option("--base-model", default=None, help="base model for --submit")
@click.pass_obj
@cli_stage
def emit_finetune(app: AppContext, source: str, filter_run: Path | None,
                  generated_run: Path | None, chapters_run: Path | None, mode: str,
                  submit: bool, base_model: str | None):
    """Emit a fine-tuning JSONL (one file, or one per subject).

    `--source accepted` trains on utility-filtered generated questions;
    `--source sft` trains on (section, exam question) pairs from the train
    split, the supervised baseline.
    """
    config = app.config
    files: list[dict[str, Any]] = []
    skipped_subjects: list[str] = []
    summary: dict[str, Any]

    if source == "accepted":
        if filter_run is None or generated_run is None:
            raise ConfigError("--source accepted needs --filter and --generated")
        accepted_path = require_artifact(filter_run, "accepted.json", stage="filter")
        generated_path = require_artifact(generated_run, "generated.jsonl", stage="generate")
        accepted = read_json(accepted_path)
        records = [GenerationRecord.from_dict(d) for d in read_jsonl(generated_path)]
        stage = begin_stage(
            app, "emit-finetune",
            inputs={
                "accepted": tree_sha256(accepted_path),
                "generated": tree_sha256(generated_path),
                "mode": mode,
                "source": source,
            },
            needs_gateway=False,
        )
        accepted_ids = accepted["accepted_ids"]
        if mode == "cross":
            examples = build_finetune_examples(records, accepted_ids)
            emit_finetune_jsonl(examples, stage.run_dir / "finetune" / "cross.jsonl")
            files.append({"file": "finetune/cross.jsonl", "examples": len(examples)})
        else:
            for subject in sorted({r.subject for r in records}):
                subject_records = [r for r in records if r.subject == subject]
                examples = build_finetune_examples(subject_records, accepted_ids)
                if not examples:
                    skipped_subjects.append(subject)
                    click.echo(f"no accepted pairs for {subject}; skipped")
                    continue
                emit_finetune_jsonl(
                    examples, stage.run_dir / "finetune" / f"{subject}.jsonl"
                )
                files.append(
                    {"file": f"finetune/{subject}.jsonl", "examples": len(examples)}
                )
            if not files:
                raise EmptyDatasetError("no accepted examples in any subject")
        summary = {
            "source": source,
            "theta": accepted.get("theta"),
            "mode": mode,
            "accepted_count": accepted.get("accepted_count"),
            "rejected_count": accepted.get("rejected_count"),
            "files": files,
            "skipped_subjects": skipped_subjects,
        }
    else:
        if chapters_run is None:
            raise ConfigError("--source sft needs --chapters")
        from .generation import build_sft_dataset

        all_chapters, chapters_hash = _load_chapter_artifact(chapters_run)
        stage = begin_stage(
            app, "emit-finetune",
            inputs={"chapters": chapters_hash, "mode": mode, "source": source},
            needs_gateway=False,
        )
        skipped_total = 0
        if mode == "cross":
            examples, skipped_total = build_sft_dataset(
                all_chapters, config.context_budget_chars
            )
            emit_finetune_jsonl(examples, stage.run_dir / "finetune" / "sft_cross.jsonl")
            files.append({"file": "finetune/sft_cross.jsonl", "examples": len(examples)})
        else:
            for subject in sorted({c.subject for c in all_chapters}):
                examples, skipped = build_sft_dataset(
                    (c for c in all_chapters if c.subject == subject),
                    config.context_budget_chars,
                )
                skipped_total += skipped
                if not examples:
                    skipped_subjects.append(subject)
                    continue
                emit_finetune_jsonl(
                    examples, stage.run_dir / "finetune" / f"sft_{subject}.jsonl"
                )
                files.append(
                    {"file": f"finetune/sft_{subject}.jsonl", "examples": len(examples)}
                )
            if not files:
                raise EmptyDatasetError("no aligned train questions in any subject")
        summary = {
            "source": source,
            "mode": mode,
            "files": files,
            "skipped_subjects": skipped_subjects,
            "unaligned_questions_skipped": skipped_total,
        }
    write_json(stage.run_dir / "finetune_summary.json", summary)
    outputs = ["finetune", "finetune_summary.json"]
    if submit:
        if not base_model:
            raise ConfigError("--base-model is required with --submit")
        submissions = []
        for entry in files:
            job_id = submit_finetune(
                stage.run_dir / entry["file"],
                base_model,
                config.resolved_base_url(),
                config.api_key(),
            )
            submissions.append({"file": entry["file"], "job_id": job_id})
            click.echo(f"submitted {entry['file']} -> job {job_id}")
        write_json(stage.run_dir / "submission.json", {"jobs": submissions})
        outputs.append("submission.json")
    for entry in files:
        click.echo(f"wrote {entry['file']} ({entry['examples']} examples)")
    stage.finish(outputs)


@main.command()
@click.option("--from", "source_dirs", type=click.Path(exists=True, path_type=Path),
              multiple=True, required=True, help="run directories to report on")
@click.pass_obj
@cli_stage
def report(app: AppContext, source_dirs: tuple[Path, ...]):
    """Render tables (CSV/TXT) and figures (PNG) from prior stage outputs."""
    from .manifest import load_manifest

    inputs = {}
    for i, directory in enumerate(sorted(str(d) for d in source_dirs)):
        manifest = load_manifest(Path(directory))
        inputs[f"src{i}"] = f"{manifest['command']}:{manifest['run_id']}"
    stage = begin_stage(app, "report", inputs=inputs, needs_gateway=False)
    out_dir = stage.run_dir / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    produced: list[str] = []

    for directory in source_dirs:
        directory = Path(directory)
        manifest = load_manifest(directory)
        outputs = manifest.get("outputs", {})
        if "chapters" in outputs:
            chapters = load_chapters(directory / "chapters")
            report_mod.plot_bloom_distribution(chapters, out_dir / "bloom_distribution.png")
            produced.append("bloom_distribution.png")
        if "corpus_stats.json" in outputs:
            data = read_json(directory / "corpus_stats.json")
            stats = CorpusStats(
                rows=tuple(CorpusStatsRow(**row) for row in data["rows"])
            )
            write_stats_csv(stats, out_dir / "corpus_stats.csv")
            produced.append("corpus_stats.csv")
        if "scores.json" in outputs:
            report_mod.write_scores_table(read_json(directory / "scores.json"), out_dir)
            produced.extend(["exam_scores.csv", "exam_scores.txt"])
        if "utilities.jsonl" in outputs:
            utilities = [row["utility"] for row in read_jsonl(directory / "utilities.jsonl")]
            report_mod.plot_utility_histogram(utilities, out_dir / "utility_histogram.png")
            produced.append("utility_histogram.png")
        if "correlations.json" in outputs:
            data = read_json(directory / "correlations.json")
            rows = [c for c in data["correlations"] if c.get("rho") is not None]
            if rows:
                report_mod.write_correlations_csv(rows, out_dir)
                produced.append("correlations.csv")
        if "sweep.json" in outputs:
            data = read_json(directory / "sweep.json")
            report_mod.plot_theta_sweep(data["rows"], out_dir / "theta_sweep.png")
            produced.append("theta_sweep.png")

    if not produced:
        raise ConfigError("no reportable artifacts found in the given run directories")
    for name in sorted(set(produced)):
        click.echo(f"reports/{name}")
    stage.finish(["reports"])


if __name__ == "__main__":
    main()
