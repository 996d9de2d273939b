"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines alongside pytest's own verdicts.
"""

from __future__ import annotations

import json
import math
import random
import time
from pathlib import Path

import pytest
from click.testing import CliRunner

from studysim.cli import main as cli_main
from studysim.corpus import curate_chapter, discover_corpus, split_train_test
from studysim.domain import Split
from studysim.errors import ChapterRejected
from studysim.finetune import filter_by_utility
from studysim.gateway import Gateway, MockBackend, MockScript, TokenDistribution
from studysim.generation import Strategy, generate_chapter_pairs
from studysim.metrics import eig, entropy, rouge_l_f1, spearman
from studysim.report import format_gain_cell
from studysim.simulator import ExamSimulator
from studysim.synthetic import build_corpus, default_mock_script, write_mock_script
from studysim.utility import estimate_utilities, plan_perturbations, simulate_with

from helpers import keyword_chapter, keyword_gateway, keyword_pair
from oracles import (
    oracle_lcs,
    oracle_rouge_l_f1,
    oracle_spearman_rho,
    oracle_utilities,
)


def report_pass(number: int, text: str) -> None:
    print(f"\nACCEPTANCE {number:02d} PASS: {text}")


def run_keyword_estimation(question_kws, pair_kws, known=(), trials=1):
    chapter = keyword_chapter(question_kws, section_kws=sorted(set(question_kws)))
    pairs = [keyword_pair(kw, variant=f" v{i}") for i, kw in enumerate(pair_kws)]
    gateway, _ = keyword_gateway(known_keywords=known)
    sim = ExamSimulator(gateway, chapter, learner_model_id="m")
    return estimate_utilities(pairs, simulate_with(sim, trials=trials, base_seed=11))


def test_criterion_1_utility_matches_subset_enumeration_oracle():
    """Simulated estimates equal brute-force subset enumeration, n,m <= 6."""
    rng = random.Random(2024)
    keyword_pool = [f"KW{c}" for c in "ABCDEF"]
    started = time.monotonic()
    checked = 0
    for n_pairs in range(1, 7):
        for m_questions in range(1, 7):
            for config in range(3):
                question_kws = [rng.choice(keyword_pool) for _ in range(m_questions)]
                pair_kws = [rng.choice(keyword_pool) for _ in range(n_pairs)]
                known = frozenset({rng.choice(keyword_pool)}) if config == 2 else frozenset()
                records = run_keyword_estimation(question_kws, pair_kws, known=known)
                expected = oracle_utilities(
                    [frozenset({kw}) for kw in pair_kws], question_kws, known=known
                )
                for record, (s_e, s_f, s_s, s_a, u) in zip(records, expected):
                    assert abs(record.s_empty - s_e) <= 1e-12
                    assert abs(record.s_full - s_f) <= 1e-12
                    assert abs(record.s_single - s_s) <= 1e-12
                    assert abs(record.s_all_but_one - s_a) <= 1e-12
                    assert abs(record.utility - u) <= 1e-12
                    checked += 1
    elapsed = time.monotonic() - started
    assert elapsed < 10.0, f"oracle sweep took {elapsed:.2f}s"
    report_pass(
        1,
        f"utility formula matches brute-force enumeration on {checked} pair "
        f"configurations (n,m <= 6) in {elapsed:.2f}s",
    )


def test_criterion_2_single_pair_identity():
    """With one pair, utility collapses to s_single - s_empty exactly."""
    rng = random.Random(7)
    keyword_pool = [f"KW{c}" for c in "ABCDEFGH"]
    for _ in range(100):
        m_questions = rng.randint(1, 6)
        question_kws = [rng.choice(keyword_pool) for _ in range(m_questions)]
        pair_kw = rng.choice(keyword_pool)
        known = frozenset({rng.choice(keyword_pool)}) if rng.random() < 0.5 else frozenset()
        record = run_keyword_estimation(question_kws, [pair_kw], known=known)[0]
        assert record.utility == record.s_single - record.s_empty  # bitwise exact
    report_pass(2, "n=1 utility equals s_single - s_empty exactly on 100 random instances")


def test_criterion_3_perturbation_economy():
    """2 shared + 2n per-pair conditions; the one-pair case folds to 3."""
    for n in range(1, 21):
        pairs = [keyword_pair(f"KW{i:02d}") for i in range(n)]
        plan = plan_perturbations(pairs)
        expected = 3 if n == 1 else 2 * n + 2
        assert len(plan.conditions()) == expected, f"n={n}"
        # Scheduling economy: shared and coincident sets simulate once.
        unique = len(plan.unique_study_sets())
        assert unique == {1: 2, 2: 4}.get(n, 2 * n + 2), f"n={n}"
    report_pass(3, "plan yields 2n+2 conditions (3 when n=1) for n=1..20")


def test_criterion_4_entropy_and_eig_math():
    def uniform(k: int) -> TokenDistribution:
        return TokenDistribution(
            token_labels=tuple(f"t{i}" for i in range(k)), probs=tuple([1.0 / k] * k)
        )

    assert entropy(TokenDistribution(("a",), (1.0,))) == 0.0
    for k in range(2, 65):
        assert abs(entropy(uniform(k)) - math.log(k)) <= 1e-9

    def eig_gateway(prior_probs, posterior_probs):
        def rule(marker, probs):
            return {
                "match": {"contains": marker},
                "response": "t",
                "logprobs": {
                    "token_labels": [f"t{i}" for i in range(len(probs))],
                    "probs": list(probs),
                },
            }

        script = MockScript.from_dict(
            {
                "rules": [
                    rule("Answer: tok", posterior_probs),
                    rule("Answer:", prior_probs),
                    {"match": {"default": True}, "response": "{}"},
                ]
            }
        )
        return Gateway(MockBackend(script))

    same = eig("q", "article", "tok", eig_gateway([0.25] * 4, [0.25] * 4), "m")
    assert same.eig == 0.0
    collapse = eig("q", "article", "tok", eig_gateway([0.25] * 4, [1.0]), "m")
    assert abs(collapse.eig - math.log(4)) <= 1e-9
    report_pass(4, "entropy one-hot/uniform and EIG identity/collapse all within 1e-9")


def test_criterion_5_spearman_oracle_equivalence():
    rng = random.Random(13)
    count = 0
    while count < 1000:
        n = rng.randint(3, 50)
        if count % 2 == 0:  # heavy ties
            x = [float(rng.randint(0, 4)) for _ in range(n)]
            y = [float(rng.randint(0, 4)) for _ in range(n)]
        else:  # continuous, effectively tie-free
            x = [rng.uniform(-5, 5) for _ in range(n)]
            y = [rng.uniform(-5, 5) for _ in range(n)]
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        ours = spearman(x, y).rho
        theirs = oracle_spearman_rho(x, y)
        assert abs(ours - theirs) <= 1e-12
        if count % 25 == 0:
            transformed = spearman([math.exp(v / 5) for v in x], y).rho
            assert abs(transformed - ours) <= 1e-12
        count += 1
    report_pass(5, "rho matches the brute-force rank oracle on 1000 vectors; "
                   "monotone-transform invariant")


def test_criterion_6_rouge_l_oracle():
    rng = random.Random(31)
    vocab = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"]
    for _ in range(500):
        a_tokens = rng.choices(vocab, k=rng.randint(1, 12))
        b_tokens = rng.choices(vocab, k=rng.randint(1, 12))
        ours = rouge_l_f1(" ".join(a_tokens), " ".join(b_tokens))
        expected = oracle_rouge_l_f1(a_tokens, b_tokens)
        assert abs(ours - expected) <= 1e-12
    assert rouge_l_f1("one two three", "one two three") == 1.0
    assert rouge_l_f1("alpha beta", "gamma delta") == 0.0
    report_pass(6, "ROUGE-L F1 agrees with the LCS oracle on 500 random pairs; "
                   "identical=1, disjoint=0")


def test_criterion_7_rejection_sampling_semantics():
    # Keyword fixture: five keywords carry two exam questions each and K5 is
    # covered by two redundant pairs, so the redundant pairs land bit-exactly
    # on utility 0.1 ((0.2 - 0) + 0) / 2 while the rest sit near 0.2.
    question_kws = [f"KW{i}" for i in (1, 2, 3, 4, 5)] * 2
    pair_kws = ["KW1", "KW2", "KW3", "KW4", "KW5", "KW5"]
    records = run_keyword_estimation(question_kws, pair_kws)
    utilities = sorted(r.utility for r in records)
    assert utilities == pytest.approx([0.1, 0.1, 0.2, 0.2, 0.2, 0.2], abs=1e-12)

    # Boundary inclusivity at the default threshold: u exactly equal to
    # theta stays accepted.
    boundary_ids = {r.qa_id for r in records if r.utility == 0.1}
    assert len(boundary_ids) == 2
    at_default = filter_by_utility(records, 0.1)
    assert boundary_ids <= set(at_default.accepted_ids)
    assert at_default.accepted_count == 6

    thetas = [0.0, 0.05, 0.1, 0.15, 0.2]
    accepted = {t: set(filter_by_utility(records, t).accepted_ids) for t in thetas}
    sizes = []
    previous = None
    for t in thetas:
        current = accepted[t]
        if previous is not None:
            assert current <= previous  # subset chain
        sizes.append(len(current))
        previous = current
    assert sizes == sorted(sizes, reverse=True)
    assert sizes[3] == 4  # the exact-boundary pairs fall out above theta=0.1
    assert sizes[-1] < sizes[0]  # higher threshold, fewer examples
    report_pass(7, f"threshold filter is boundary-inclusive with a subset chain {sizes}")


def test_criterion_8_corpus_rules(tmp_path):
    subjects = ["Microbiology", "Chemistry", "Economics", "Sociology", "USHistory"]
    corpus_dir = build_corpus(tmp_path / "corpus", subjects=subjects, chapters_per_subject=26)
    gateway = Gateway(MockBackend(MockScript.from_dict(default_mock_script())))
    started = time.monotonic()
    raws = discover_corpus(corpus_dir)
    curated = []
    rejected = []
    for raw in raws:
        try:
            chapter, _ = curate_chapter(raw, gateway, "m")
            curated.append(chapter)
        except ChapterRejected as rejection:
            rejected.append(rejection)
    chapters = split_train_test(curated)
    elapsed = time.monotonic() - started

    assert len(rejected) == len(subjects)  # one undersized chapter per subject
    assert all(r.count == 9 for r in rejected)
    capped = [c for c in chapters if c.ordinal == 2]
    assert all(len(c.exam.questions) == 25 for c in capped)  # 30 -> first 25
    for subject in subjects:
        mine = sorted((c for c in chapters if c.subject == subject), key=lambda c: c.ordinal)
        assert len(mine) == 25
        assert [c.split for c in mine[:20]] == [Split.TRAIN] * 20
        assert [c.split for c in mine[20:]] == [Split.TEST] * 5
    assert elapsed < 5.0, f"corpus pipeline took {elapsed:.2f}s"
    report_pass(8, f"reject <10, cap at 25, split 20/5 across 5 subjects in {elapsed:.2f}s")


class RecordingBackend:
    """Wraps a backend and keeps every prompt that actually reaches it."""

    def __init__(self, inner):
        self.inner = inner
        self.prompts: list[str] = []

    def identity(self):
        return self.inner.identity()

    def complete(self, request):
        self.prompts.append(request.prompt_text())
        return self.inner.complete(request)

    def embed(self, text, model_id=""):
        return self.inner.embed(text, model_id)


def test_criterion_9_isolation_contracts(tmp_path):
    from studysim.finetune import build_finetune_examples, emit_finetune_jsonl

    chapter = keyword_chapter(
        ["KWA", "KWB", "KWC", "KWD"], section_kws=["KWA", "KWB", "KWC", "KWD"]
    )
    recorder = RecordingBackend(MockBackend(MockScript.from_dict(default_mock_script())))
    gateway = Gateway(recorder)
    records = generate_chapter_pairs(chapter, Strategy.ZERO_SHOT, gateway, "m")
    sim = ExamSimulator(gateway, chapter, learner_model_id="m")
    estimate_utilities(
        [r.qa for r in records], simulate_with(sim, trials=2, base_seed=3)
    )

    section_texts = [s.content for s in chapter.sections]
    learner_prompts = [p for p in recorder.prompts if "structured learning simulation" in p]
    answer_prompts = [p for p in recorder.prompts if "Answer each question shortly" in p]
    evaluator_prompts = [p for p in recorder.prompts if "teacher who is evaluating" in p]
    assert learner_prompts and answer_prompts and evaluator_prompts
    for prompt in learner_prompts + answer_prompts:
        for section in section_texts:
            assert section not in prompt
    # the evaluator is the one place the document may appear
    assert any(section_texts[0] in p for p in evaluator_prompts)

    examples = build_finetune_examples(records, [r.qa.id for r in records])
    path = emit_finetune_jsonl(examples, tmp_path / "ft.jsonl")
    answers = [r.qa.answer for r in records]
    for line in path.read_text(encoding="utf-8").splitlines():
        assistant = json.loads(line)["messages"][2]["content"]
        for answer in answers:
            assert answer not in assistant
    report_pass(9, f"no chapter text in {len(learner_prompts)} learner / "
                   f"{len(answer_prompts)} answer prompts; no answer text in emitted files")


def _drive_pipeline(runner: CliRunner, runs_root: Path, corpus: Path, script: Path):
    """Run the full stage chain; returns {command: run_dir} for this pass."""
    base = ["--backend", f"mock:{script}", "--runs-root", str(runs_root), "--seed", "5"]
    created: dict[str, Path] = {}

    def invoke(command: str, *args):
        before = set(runs_root.glob("*")) if runs_root.exists() else set()
        result = runner.invoke(cli_main, base + [command, *args], catch_exceptions=False)
        assert result.exit_code == 0, result.output
        new = {p for p in runs_root.glob("*") if p.name != "cache"} - before
        assert len(new) == 1
        created[command] = new.pop()
        return created[command]

    ingest = invoke("ingest", "--corpus-dir", str(corpus))
    generate = invoke("generate", "--chapters", str(ingest), "--trials", "1",
                      "--split", "train")
    invoke("run", "--chapters", str(ingest), "--trials", "1", "--split", "test")
    utility = invoke("utility", "--chapters", str(ingest), "--generated", str(generate),
                     "--trials", "1")
    invoke("metrics", "--chapters", str(ingest), "--generated", str(generate),
           "--utilities", str(utility))
    filtered = invoke("filter", "--utilities", str(utility), "--theta", "0.1")
    invoke("emit-finetune", "--filter", str(filtered), "--generated", str(generate),
           "--mode", "cross")
    return created


def _comparable_files(run_dir: Path) -> dict[str, bytes]:
    out: dict[str, bytes] = {}
    for path in sorted(run_dir.rglob("*")):
        if not path.is_file():
            continue
        rel = path.relative_to(run_dir).as_posix()
        if rel == "accounting.json" or rel.startswith("cache/"):
            continue  # wall-clock and backend-hit records; cache is not an output
        out[rel] = path.read_bytes()
    return out


def test_criterion_10_end_to_end_determinism(tmp_path):
    corpus = build_corpus(
        tmp_path / "corpus", subjects=["Alpha"], chapters_per_subject=26, sections=2
    )
    script = write_mock_script(tmp_path / "script.json")
    runner = CliRunner()
    runs_root = tmp_path / "runs"

    first = _drive_pipeline(runner, runs_root, corpus, script)
    second = _drive_pipeline(runner, runs_root, corpus, script)

    compared_files = 0
    for command, first_dir in first.items():
        second_dir = second[command]
        assert first_dir != second_dir  # immutable runs: a fresh directory each time
        a = _comparable_files(first_dir)
        b = _comparable_files(second_dir)
        assert a.keys() == b.keys(), f"{command}: file sets differ"
        for rel in a:
            assert a[rel] == b[rel], f"{command}/{rel} differs between executions"
        compared_files += len(a)
        accounting = json.loads((second_dir / "accounting.json").read_text())
        if command not in ("filter", "emit-finetune"):  # these stages make no LM calls
            assert accounting["backend_calls"] == 0, f"{command} hit the backend when cached"

    report_pass(
        10,
        f"two executions byte-identical across {compared_files} files in "
        f"{len(first)} stages; cached pass made zero backend calls",
    )


def test_criterion_11_gain_reporting_shape():
    assert format_gain_cell(0.76, 0.46) == "0.76 (+0.30)"
    report_pass(11, 'gain cell renders as "0.76 (+0.30)"')
