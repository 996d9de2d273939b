from __future__ import annotations

import json
from collections import Counter

import pytest

from studysim.domain import Bloom, Section, Split
from studysim.errors import AnswerError, ExemplarError, GenerationError, InvalidInputError
from studysim.gateway import Gateway, MockBackend, MockScript
from studysim.generation import (
    BloomSampler,
    GenerationContext,
    Strategy,
    build_sft_dataset,
    exemplar_pool,
    generate_answers,
    generate_chapter_pairs,
    generate_question,
    sample_exemplars,
)
from studysim.prompts import render_question_prompt

from helpers import keyword_chapter, keyword_gateway


def script_backend(*rules):
    script = MockScript.from_dict(
        {"rules": list(rules) + [{"match": {"default": True}, "response": "{}"}]}
    )
    backend = MockBackend(script)
    return Gateway(backend), backend


def ctx(anchor_index=2, contents=("first part", "the anchor")):
    sections = [Section(index=i, content=c) for i, c in enumerate(contents, start=1)]
    return GenerationContext(
        chapter_id="C-001",
        anchor=sections[anchor_index - 1],
        preceding=tuple(sections[: anchor_index - 1]),
    )


EXEMPLARS = [(f"section text {i}", f"exam question {i}?") for i in range(5)]


class TestGenerateQuestion:
    def test_zero_shot_scripted(self):
        gateway, _ = script_backend(
            {
                "match": {"contains": "Generate a question"},
                "response": json.dumps({"question": "What is X?"}),
            }
        )
        out = generate_question(ctx(), Strategy.ZERO_SHOT, gateway, "m", trial=0)
        assert out.question == "What is X?"
        assert out.provenance().strategy == "zero_shot"
        assert out.provenance().trial == 0

    def test_cot_discards_reasoning(self):
        gateway, _ = script_backend(
            {
                "match": {"contains": "reasoning trace"},
                "response": json.dumps({"reasoning": "think...", "question": "Why X?"}),
            }
        )
        out = generate_question(ctx(), Strategy.COT, gateway, "m")
        assert out.question == "Why X?"
        assert "think" not in out.question

    def test_few_shot_requires_five_exemplars(self):
        gateway, _ = script_backend()
        with pytest.raises(ExemplarError):
            generate_question(
                ctx(), Strategy.FEW_SHOT, gateway, "m", exemplars=EXEMPLARS[:4]
            )

    def test_few_shot_prompt_carries_exemplars(self):
        gateway, _ = script_backend(
            {
                "match": {"contains": "Generate a question"},
                "response": json.dumps({"question": "Q?"}),
            }
        )
        out = generate_question(ctx(), Strategy.FEW_SHOT, gateway, "m", exemplars=EXEMPLARS)
        for content, question in EXEMPLARS:
            assert content in out.user_prompt
            assert question in out.user_prompt

    def test_unparseable_output_is_generation_error(self):
        gateway, backend = script_backend(
            {"match": {"contains": "Generate a question"}, "response": "not json"}
        )
        with pytest.raises(GenerationError):
            generate_question(ctx(), Strategy.ZERO_SHOT, gateway, "m")
        assert backend.call_count == 3

    def test_no_future_section_leaks_into_prompt(self):
        gateway, _ = script_backend(
            {
                "match": {"contains": "Generate a question"},
                "response": json.dumps({"question": "Q?"}),
            }
        )
        chapter = keyword_chapter(["KWA", "KWB", "KWC"], section_kws=["KWA", "KWB", "KWC"])
        context = GenerationContext(
            chapter_id=chapter.id,
            anchor=chapter.sections[1],
            preceding=chapter.sections[:1],
        )
        out = generate_question(context, Strategy.ZERO_SHOT, gateway, "m")
        assert "KWC" not in out.user_prompt  # section 3 is in the future
        assert "KWB" in out.user_prompt

    def test_anchor_survives_budget_truncation(self):
        big = ["x" * 400, "y" * 400, "anchor text"]
        context = GenerationContext(
            chapter_id="C",
            anchor=Section(index=3, content=big[2]),
            preceding=(Section(1, big[0]), Section(2, big[1])),
        )
        gateway, _ = script_backend(
            {
                "match": {"contains": "Generate a question"},
                "response": json.dumps({"question": "Q?"}),
            }
        )
        out = generate_question(
            context, Strategy.ZERO_SHOT, gateway, "m", context_budget_chars=500
        )
        assert "anchor text" in out.user_prompt
        assert "x" * 400 not in out.user_prompt  # oldest dropped first
        assert "y" * 400 in out.user_prompt

    def test_bloom_based_two_steps_and_provenance(self):
        gateway, backend = keyword_gateway()
        sampler = BloomSampler({Bloom.REMEMBERING: 1.0}, seed=1)
        chapter = keyword_chapter(["KWA"])
        context = GenerationContext(chapter_id=chapter.id, anchor=chapter.sections[0])
        out = generate_question(
            context, Strategy.BLOOM_BASED, gateway, "m", sampler=sampler
        )
        assert out.bloom_level is Bloom.REMEMBERING
        assert backend.call_count == 2
        assert "KWA" in out.question

    def test_preceding_after_anchor_rejected(self):
        with pytest.raises(InvalidInputError):
            GenerationContext(
                chapter_id="C",
                anchor=Section(index=1, content="a"),
                preceding=(Section(index=2, content="b"),),
            )


class TestBloomSampler:
    def test_distribution_must_sum_to_one(self):
        with pytest.raises(InvalidInputError):
            BloomSampler({Bloom.REMEMBERING: 0.5}, seed=0)

    def test_seeded_sequence_reproducible(self):
        dist = {Bloom.REMEMBERING: 0.5, Bloom.UNDERSTANDING: 0.5}
        a = BloomSampler(dist, seed=7)
        b = BloomSampler(dist, seed=7)
        assert [a.sample() for _ in range(50)] == [b.sample() for _ in range(50)]

    def test_frequencies_converge_to_distribution(self):
        dist = {Bloom.REMEMBERING: 0.3, Bloom.UNDERSTANDING: 0.5, Bloom.CREATING: 0.2}
        sampler = BloomSampler(dist, seed=11)
        counts = Counter(sampler.sample() for _ in range(10_000))
        for level, p in dist.items():
            assert counts[level] / 10_000 == pytest.approx(p, abs=0.03)

    def test_from_counts(self):
        sampler = BloomSampler.from_counts({Bloom.APPLYING: 3, Bloom.CREATING: 1}, seed=0)
        assert sampler.distribution[Bloom.APPLYING] == pytest.approx(0.75)


class TestGenerateAnswers:
    def test_answers_zip_in_order(self):
        gateway, _ = keyword_gateway()
        answers = generate_answers(["What is KWA?", "What is KWB?"], gateway, "m")
        assert len(answers) == 2
        assert "KWA" in answers[0] and "KWB" in answers[1]

    def test_count_mismatch_exhausts_retries(self):
        reply = json.dumps({"qa_pairs": [{"question": "q1", "answer": "a1"}]})
        gateway, backend = script_backend(
            {"match": {"contains": "Answer each question shortly"}, "response": reply}
        )
        with pytest.raises(AnswerError):
            generate_answers(["q1", "q2", "q3"], gateway, "m")
        assert backend.call_count == 3

    def test_prompt_contains_only_questions(self):
        chapter = keyword_chapter(["KWA"])
        gateway, backend = keyword_gateway()
        records = generate_chapter_pairs(chapter, Strategy.ZERO_SHOT, gateway, "m")
        # Find the answer-generator request in the cache log via the mock:
        # simpler to re-render and assert on the prompt builder directly.
        from studysim.prompts import render_answer_prompt

        prompt = render_answer_prompt([r.qa.question for r in records])
        for section in chapter.sections:
            assert section.content not in prompt

    def test_empty_questions_rejected(self):
        gateway, _ = keyword_gateway()
        with pytest.raises(AnswerError):
            generate_answers([], gateway, "m")


class TestChapterGeneration:
    def test_one_pair_per_section(self):
        chapter = keyword_chapter(["KWA", "KWB"], section_kws=["KWA", "KWB"])
        gateway, _ = keyword_gateway()
        records = generate_chapter_pairs(chapter, Strategy.ZERO_SHOT, gateway, "m")
        assert len(records) == 2
        assert [r.qa.anchor_section for r in records] == [1, 2]
        assert "KWA" in records[0].qa.question
        assert "KWB" in records[1].qa.question

    def test_trials_produce_distinct_ids_even_with_identical_text(self):
        chapter = keyword_chapter(["KWA"])
        gateway, _ = keyword_gateway()
        ids = set()
        questions = set()
        for trial in range(3):
            records = generate_chapter_pairs(
                chapter, Strategy.ZERO_SHOT, gateway, "m", trial=trial
            )
            ids.add(records[0].qa.id)
            questions.add(records[0].qa.question)
        assert len(questions) == 1  # the scripted reply is trial-independent
        assert len(ids) == 3

    def test_user_prompt_recorded_verbatim(self):
        chapter = keyword_chapter(["KWA"])
        gateway, _ = keyword_gateway()
        record = generate_chapter_pairs(chapter, Strategy.ZERO_SHOT, gateway, "m")[0]
        expected = render_question_prompt("", chapter.sections[0].content)
        assert record.user_prompt == expected


class TestExemplars:
    def chapters(self):
        chapter = keyword_chapter(["KWA", "KWB"], section_kws=["KWA", "KWB"])
        aligned = []
        for i, q in enumerate(chapter.exam.questions, start=1):
            from dataclasses import replace

            aligned.append(replace(q, aligned_sections=(i,)))
        from studysim.domain import Chapter, Exam

        return [
            Chapter(
                id=chapter.id, subject=chapter.subject, title=chapter.title,
                sections=chapter.sections, exam=Exam(questions=tuple(aligned)),
                split=Split.TRAIN, ordinal=1,
            )
        ]

    def test_pool_from_aligned_train_chapters(self):
        pool = exemplar_pool(self.chapters())
        assert len(pool) == 2
        assert pool[0][1] == "Define KWA."

    def test_sampling_fixed_per_seed(self):
        pool = [(f"s{i}", f"q{i}") for i in range(20)]
        assert sample_exemplars(pool, seed=3) == sample_exemplars(pool, seed=3)
        assert sample_exemplars(pool, seed=3) != sample_exemplars(pool, seed=4)

    def test_small_pool_rejected(self):
        with pytest.raises(ExemplarError):
            sample_exemplars([("s", "q")] * 4, seed=0)


class TestSftDataset:
    def chapters(self):
        from dataclasses import replace

        from studysim.domain import Chapter, Exam

        chapter = keyword_chapter(
            ["KWA", "KWB", "KWC"], section_kws=["KWA", "KWB", "KWC"], split=Split.TRAIN
        )
        questions = list(chapter.exam.questions)
        questions[0] = replace(questions[0], aligned_sections=(2, 3))
        questions[1] = replace(questions[1], aligned_sections=())
        questions[2] = replace(questions[2], aligned_sections=(1,))
        return [
            Chapter(
                id=chapter.id, subject=chapter.subject, title=chapter.title,
                sections=chapter.sections, exam=Exam(questions=tuple(questions)),
                split=Split.TRAIN, ordinal=1,
            )
        ]

    def test_fan_out_per_aligned_section(self):
        examples, skipped = build_sft_dataset(self.chapters())
        assert len(examples) == 3  # q1 -> 2 sections, q3 -> 1 section
        assert skipped == 1  # q2 has no alignment

    def test_prompt_contains_anchor_verbatim(self):
        examples, _ = build_sft_dataset(self.chapters())
        chapter = self.chapters()[0]
        by_index = {s.index: s for s in chapter.sections}
        first = examples[0]["messages"]
        assert by_index[2].content in first[1]["content"]
        assert first[2]["content"] == "Define KWA."

    def test_targets_are_exam_questions(self):
        examples, _ = build_sft_dataset(self.chapters())
        targets = {e["messages"][2]["content"] for e in examples}
        assert targets == {"Define KWA.", "Define KWC."}
