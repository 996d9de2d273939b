from __future__ import annotations

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from studysim.cli import main
from studysim.report import format_gain_cell
from studysim.storage import read_json, read_jsonl
from studysim.synthetic import build_corpus, write_mock_script


@pytest.fixture(scope="module")
def workspace(tmp_path_factory) -> dict:
    """One small corpus + a completed pipeline, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus = build_corpus(
        root / "corpus", subjects=["Alpha"], chapters_per_subject=26, sections=2
    )
    script = write_mock_script(root / "script.json")
    runner = CliRunner()
    base = [
        "--backend", f"mock:{script}", "--runs-root", str(root / "runs"), "--seed", "5",
    ]

    def invoke(*args, expect=0):
        """Run a command; return the run directory it created (if exactly one)."""
        runs = root / "runs"
        before = set(runs.glob("*")) if runs.exists() else set()
        result = runner.invoke(main, base + list(args), catch_exceptions=False)
        assert result.exit_code == expect, result.output
        created = {p for p in runs.glob("*") if p.name != "cache"} - before
        return created.pop() if len(created) == 1 else None

    ingest_dir = invoke("ingest", "--corpus-dir", str(corpus))
    generate_dir = invoke(
        "generate", "--chapters", str(ingest_dir), "--trials", "1", "--split", "train"
    )
    utility_dir = invoke(
        "utility", "--chapters", str(ingest_dir), "--generated", str(generate_dir),
        "--trials", "1",
    )
    return {
        "root": root,
        "corpus": corpus,
        "script": script,
        "runner": runner,
        "base": base,
        "invoke": invoke,
        "ingest": ingest_dir,
        "generate": generate_dir,
        "utility": utility_dir,
    }


class TestIngest:
    def test_split_counts(self, workspace):
        chapters = read_json(workspace["ingest"] / "corpus_stats.json")["rows"]
        by_split = {row["split"]: row["chapter_count"] for row in chapters}
        assert by_split == {"Train": 20, "Test": 5}

    def test_undersized_chapter_rejected_and_reported(self, workspace):
        rejected = read_json(workspace["ingest"] / "rejected.json")
        assert rejected == [{"chapter_id": "Alpha-026", "usable_questions": 9}]

    def test_oversized_exam_capped(self, workspace):
        chapter = read_json(workspace["ingest"] / "chapters" / "Alpha" / "002.json")
        assert len(chapter["exam"]["questions"]) == 25

    def test_empty_corpus_dir_exits_2(self, workspace, tmp_path):
        empty = tmp_path / "nothing"
        empty.mkdir()
        result = workspace["runner"].invoke(
            main,
            workspace["base"] + ["ingest", "--corpus-dir", str(empty)],
            catch_exceptions=False,
        )
        assert result.exit_code == 2

    def test_manifest_records_outputs(self, workspace):
        manifest = read_json(workspace["ingest"] / "manifest.json")
        assert "chapters" in manifest["outputs"]
        assert manifest["command"] == "ingest"
        assert manifest["seed"] == 5


class TestRun:
    def test_positive_gain_over_no_study(self, workspace):
        run_dir = workspace["invoke"](
            "run", "--chapters", str(workspace["ingest"]), "--trials", "1",
            "--split", "test",
        )
        scores = read_json(run_dir / "scores.json")
        assert len(scores["subjects"]) == 1
        row = scores["subjects"][0]
        assert row["gain"] > 0
        assert row["no_study"] == 0.0
        assert (run_dir / "exam_scores.csv").exists()
        assert (run_dir / "exam_scores.txt").exists()

    def test_gain_cell_format(self):
        assert format_gain_cell(0.76, 0.46) == "0.76 (+0.30)"
        assert format_gain_cell(0.40, 0.46) == "0.40 (-0.06)"
        assert format_gain_cell(0.61, 0.61) == "0.61 (+0.00)"


class TestUtilityStage:
    def test_records_are_internally_consistent(self, workspace):
        rows = read_jsonl(workspace["utility"] / "utilities.jsonl")
        assert rows
        for row in rows:
            recomputed = ((row["s_single"] - row["s_empty"]) +
                          (row["s_full"] - row["s_all_but_one"])) / 2
            assert abs(recomputed - row["utility"]) <= 1e-12

    def test_csv_mirror_emitted(self, workspace):
        lines = (workspace["utility"] / "utilities.csv").read_text().splitlines()
        assert lines[0] == "qa_id,utility,s_empty,s_full,s_single,s_all_but_one"
        assert len(lines) == len(read_jsonl(workspace["utility"] / "utilities.jsonl")) + 1


class TestMetricsStage:
    def test_metrics_and_correlations(self, workspace):
        metrics_dir = workspace["invoke"](
            "metrics", "--chapters", str(workspace["ingest"]),
            "--generated", str(workspace["generate"]),
            "--utilities", str(workspace["utility"]),
        )
        rows = read_jsonl(metrics_dir / "metrics.jsonl")
        assert rows
        for row in rows:
            assert 1 <= row["salience"] <= 5
            assert 1 <= row["bloom_depth"] <= 6
            assert 0.0 <= row["max_rouge_l"] <= 1.0
            assert row["utility"] is not None
        correlations = read_json(metrics_dir / "correlations.json")["correlations"]
        pairs = [(c["metric1"], c["metric2"]) for c in correlations]
        assert pairs == [
            ("utility", "salience"),
            ("utility", "eig"),
            ("salience", "eig"),
        ]
        for entry in correlations:
            assert "rho" in entry and "p_value" in entry and entry["n"] >= 3


class TestFilterStage:
    def test_filter_before_utility_exits_3(self, workspace, tmp_path):
        not_a_run = tmp_path / "nope"
        not_a_run.mkdir()
        result = workspace["runner"].invoke(
            main,
            workspace["base"] + ["filter", "--utilities", str(not_a_run)],
            catch_exceptions=False,
        )
        assert result.exit_code == 3
        assert "utility" in result.output

    def test_plain_filter(self, workspace):
        filter_dir = workspace["invoke"](
            "filter", "--utilities", str(workspace["utility"]), "--theta", "0.1"
        )
        accepted = read_json(filter_dir / "accepted.json")
        assert accepted["theta"] == 0.1
        assert accepted["accepted_count"] + accepted["rejected_count"] == len(
            read_jsonl(workspace["utility"] / "utilities.jsonl")
        )
        assert accepted["accepted_count"] > 0

    def test_sweep_datasets_shrink(self, workspace):
        sweep_dir = workspace["invoke"](
            "filter", "--utilities", str(workspace["utility"]),
            "--sweep", "0,0.3,0.6,0.9",
            "--generated", str(workspace["generate"]),
        )
        rows = read_json(sweep_dir / "sweep.json")["rows"]
        sizes = [row["accepted_count"] for row in rows]
        assert sizes == sorted(sizes, reverse=True)
        csv_lines = (sweep_dir / "sweep.csv").read_text().splitlines()
        assert csv_lines[0] == "theta,accepted_count,rejected_count,dataset"
        for row in rows:
            if row["accepted_count"] > 0:
                assert (sweep_dir / row["dataset"]).exists()


class TestEmitStage:
    def test_cross_mode(self, workspace):
        invoke = workspace["invoke"]
        filter_dir = invoke(
            "filter", "--utilities", str(workspace["utility"]), "--theta", "0.1"
        )
        emit_dir = invoke(
            "emit-finetune", "--filter", str(filter_dir),
            "--generated", str(workspace["generate"]), "--mode", "cross",
        )
        dataset = emit_dir / "finetune" / "cross.jsonl"
        lines = dataset.read_text().splitlines()
        accepted = read_json(filter_dir / "accepted.json")
        assert len(lines) == accepted["accepted_count"]
        for line in lines:
            messages = json.loads(line)["messages"]
            assert messages[2]["content"].startswith("What is")

    def test_subject_mode_one_file_per_subject(self, workspace):
        invoke = workspace["invoke"]
        filter_dir = invoke(
            "filter", "--utilities", str(workspace["utility"]), "--theta", "0.1"
        )
        emit_dir = invoke(
            "emit-finetune", "--filter", str(filter_dir),
            "--generated", str(workspace["generate"]), "--mode", "subject",
        )
        files = sorted((emit_dir / "finetune").glob("*.jsonl"))
        assert [f.name for f in files] == ["Alpha.jsonl"]

    def test_sft_source_emits_aligned_exam_questions(self, workspace):
        emit_dir = workspace["invoke"](
            "emit-finetune", "--source", "sft",
            "--chapters", str(workspace["ingest"]), "--mode", "cross",
        )
        dataset = emit_dir / "finetune" / "sft_cross.jsonl"
        lines = dataset.read_text().splitlines()
        assert lines
        for line in lines:
            messages = json.loads(line)["messages"]
            assert [m["role"] for m in messages] == ["system", "user", "assistant"]
            assert messages[2]["content"].startswith("Define KW")
        summary = read_json(emit_dir / "finetune_summary.json")
        assert summary["source"] == "sft"

    def test_sft_source_requires_chapters(self, workspace):
        result = workspace["runner"].invoke(
            main, workspace["base"] + ["emit-finetune", "--source", "sft"],
            catch_exceptions=False,
        )
        assert result.exit_code == 2


class TestReportStage:
    def test_report_renders_tables_and_figures(self, workspace):
        invoke = workspace["invoke"]
        run_dir = invoke(
            "run", "--chapters", str(workspace["ingest"]), "--trials", "1",
            "--split", "test",
        )
        sweep_dir = invoke(
            "filter", "--utilities", str(workspace["utility"]),
            "--sweep", "0,0.3,0.6", "--generated", str(workspace["generate"]),
        )
        report_dir = invoke(
            "report",
            "--from", str(workspace["ingest"]),
            "--from", str(workspace["utility"]),
            "--from", str(run_dir),
            "--from", str(sweep_dir),
        )
        produced = {p.name for p in (report_dir / "reports").iterdir()}
        assert {
            "corpus_stats.csv",
            "bloom_distribution.png",
            "utility_histogram.png",
            "exam_scores.csv",
            "exam_scores.txt",
            "theta_sweep.png",
        } <= produced

    def test_report_without_artifacts_exits_2(self, workspace, tmp_path):
        invoke = workspace["invoke"]
        filter_dir = invoke(
            "filter", "--utilities", str(workspace["utility"]), "--theta", "0.1"
        )
        result = workspace["runner"].invoke(
            main,
            workspace["base"] + ["report", "--from", str(filter_dir)],
            catch_exceptions=False,
        )
        assert result.exit_code == 2


class TestIdempotence:
    def test_second_invocation_hits_cache_only(self, workspace):
        second = workspace["invoke"]("ingest", "--corpus-dir", str(workspace["corpus"]))
        accounting = read_json(second / "accounting.json")
        assert accounting["backend_calls"] == 0
        assert accounting["cache_hits"] > 0


class TestStrategies:
    @pytest.mark.parametrize("strategy", ["few_shot", "cot", "bloom_based"])
    def test_alternate_strategies_run_end_to_end(self, workspace, strategy):
        generate_dir = workspace["invoke"](
            "generate", "--chapters", str(workspace["ingest"]), "--trials", "1",
            "--split", "test", "--strategy", strategy,
        )
        rows = read_jsonl(generate_dir / "generated.jsonl")
        assert len(rows) == 10  # 5 test chapters x 2 sections
        for row in rows:
            assert row["qa"]["generator"]["strategy"] == strategy
            if strategy == "bloom_based":
                assert row["qa"]["generator"]["bloom_level"] is not None


class TestFineTunedPassthrough:
    def test_generate_with_custom_model_id(self, workspace):
        generate_dir = workspace["invoke"](
            "generate", "--chapters", str(workspace["ingest"]), "--trials", "1",
            "--split", "test", "--strategy", "fine_tuned",
            "--model-id", "ft:gpt-4o-mini:custom",
        )
        rows = read_jsonl(generate_dir / "generated.jsonl")
        assert rows
        for row in rows:
            assert row["qa"]["generator"]["model_id"] == "ft:gpt-4o-mini:custom"
            assert row["qa"]["generator"]["strategy"] == "fine_tuned"

    def test_missing_model_id_exits_2(self, workspace):
        result = workspace["runner"].invoke(
            main,
            workspace["base"] + [
                "generate", "--chapters", str(workspace["ingest"]),
                "--strategy", "fine_tuned",
            ],
            catch_exceptions=False,
        )
        assert result.exit_code == 2
        assert "--model-id" in result.output


class TestBackendFailureExitCode:
    def test_unreachable_endpoint_exits_4(self, workspace, tmp_path):
        config = tmp_path / "config.yaml"
        config.write_text(
            "backend: openai\n"
            "base_url: http://127.0.0.1:1\n"  # nothing listens here
            "retry_max_attempts: 2\n"
            "retry_backoff_base: 0.0\n"
        )
        runner = CliRunner()
        result = runner.invoke(
            main,
            ["--config", str(config), "--runs-root", str(tmp_path / "runs"),
             "ingest", "--corpus-dir", str(workspace["corpus"])],
            catch_exceptions=False,
        )
        assert result.exit_code == 4


class TestConfigHandling:
    def test_missing_backend_rejected(self, workspace, tmp_path):
        runner = CliRunner()
        result = runner.invoke(
            main,
            ["--runs-root", str(tmp_path), "ingest", "--corpus-dir", str(workspace["corpus"])],
            catch_exceptions=False,
        )
        assert result.exit_code == 2
        assert "backend" in result.output

    def test_unknown_config_key_rejected(self, tmp_path):
        config = tmp_path / "config.yaml"
        config.write_text("not_a_real_key: 1\n")
        runner = CliRunner()
        result = runner.invoke(
            main, ["--config", str(config), "ingest", "--corpus-dir", "x"],
            catch_exceptions=False,
        )
        assert result.exit_code == 2

    def test_config_file_defaults_applied(self, tmp_path, workspace):
        config = tmp_path / "config.yaml"
        config.write_text(f"backend: mock:{workspace['script']}\ntheta: 0.25\n")
        runner = CliRunner()
        result = runner.invoke(
            main,
            ["--config", str(config), "--runs-root", str(tmp_path / "runs"),
             "filter", "--utilities", str(workspace["utility"])],
            catch_exceptions=False,
        )
        assert result.exit_code == 0
        filter_dir = next((tmp_path / "runs").glob("filter-*"))
        assert read_json(filter_dir / "accepted.json")["theta"] == 0.25
