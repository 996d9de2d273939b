"""Prompt templates and renderers for every LM-facing role.

The learner must never see chapter text and the answer generator must never
see anything but the questions; renderers here are the single place those
isolation rules are enforced, so tests can assert them by substring.
"""

from __future__ import annotations

import json
from typing import Iterable, Sequence

from .domain import Bloom, ExamQuestion, QAPair, Section

REFUSAL = "I don't know. I have not been studied on this."

LEARNING_MATERIALS_OPEN = "[LEARNING MATERIALS]"
LEARNING_MATERIALS_CLOSE = "[/LEARNING MATERIALS]"
EXAM_OPEN = "[EXAM]"
EXAM_CLOSE = "[/EXAM]"

QUESTION_SYSTEM_PROMPT = (
    "You are a question generator helping a student study a textbook chapter."
)

QUESTION_PROMPT = """Article: {article}
Student is currently reading the section: {section}.
Generate a question that helps the student understand the section better.

Output in the following JSON format:
```json
{{
    "question": question
}}
```"""

COT_QUESTION_PROMPT = """Article: {article}
Student is currently reading the section: {section}.
First write a short reasoning trace about what the student most needs to
understand, then generate a question that helps the student understand the
section better.

Output in the following JSON format:
```json
{{
    "reasoning": reasoning,
    "question": question
}}
```"""

FEW_SHOT_PREFIX = """Here are examples of sections paired with exam questions written for them:

{examples}

"""

ANSWER_PROMPT = """questions: {questions}

Answer each question shortly and output
in following JSON format:
```json
{{
    "qa_pairs": [
        {{"question": question_1, "answer": answer_1}},
        {{"question": question_2, "answer": answer_2}},
        ...
        {{"question": question_n, "answer": answer_n}}
    ]
}}
```"""

LEARNER_PROMPT = """You are now a learner participating in a structured learning simulation.
Your task is to:

1. **Study the Provided Learning Materials:** Carefully read and understand
   the content enclosed in the [LEARNING MATERIALS] tags.

2. **Answer the Exam Questions Using Only the Learning Materials:**
   When you respond to the questions in the [EXAM], you must:
   - Base all answers solely on the information contained in the
     [LEARNING MATERIALS].
   - Clearly show how your reasoning follows from the [LEARNING MATERIALS].
   - If the question asks about something not covered in the
     [LEARNING MATERIALS], do not provide an answer or guess. Instead,
     respond exactly with:

     I don't know. I have not been studied on this.

   - Do not use information from outside the [LEARNING MATERIALS].

3. **No External Knowledge or Guessing:**
   Provide no additional reasoning or information if the content is not in
   the [LEARNING MATERIALS].

Let's begin.

[LEARNING MATERIALS]
{learning_material}
[/LEARNING MATERIALS]

Now, proceed to the exam below and answer as instructed:

[EXAM]
{exam}
[/EXAM]

Response answers in the following JSON format (key: Exam question number,
value: your answer):
{{
    "1": "< your answer to exam question 1 >",
    "2": "< your answer to exam question 2 >",
    ...
}}"""

EVALUATOR_PROMPT = """You are a teacher who is evaluating a student's understanding of a document.

Here is the document:
{document}

Now, determine the correctness of the student's answers to the following
question.

question:
{question}

ground truth:
{answer}

student's answer:
{prediction}

Please provide a score between 0 and 1, where:
- 0 indicates the student's answer is completely incorrect.
- 1 indicates the student's answer is completely correct.

If ground truth is not provided (e.g., None), determine the correctness of
the student's answer based on your own understanding of the document.

Answer in the following JSON format:

{{
    "score": <score>,
    "feedback": "<feedback>"
}}"""

SECTIONING_PROMPT = """Instructions for extracting sections from the given textbook content:

1. Transform markdown for equations into LaTeX and remove all other markdown
   formatting to only keep the raw content.
2. Split the content into sections of uniform length and number each section.
3. Skip the learning objectives, key concepts, and summary content.
4. Ensure that all content, except skipped parts, is covered verbatim in at
   least one of the resulting sections.

# EXAMPLE
## INPUT:
{example_input}

## OUTPUT:
{example_output}

Produce only valid JSON with the following format:
{{
    "section": {{
        "1": {{
            "content": "Verbatim section 1 content from chapter"
        }},
        ...
    }}
}}

# TARGET TEXTBOOK CONTENT:
{target_content}"""

BLOOM_DEFINITIONS: dict[Bloom, str] = {
    Bloom.REMEMBERING: (
        "Producing or retrieving definitions, facts, or lists, or reciting "
        "previously learned information."
    ),
    Bloom.UNDERSTANDING: (
        "Grasping the meaning of information by interpreting and translating "
        "what has been learned."
    ),
    Bloom.APPLYING: "Using learned information in new and concrete situations.",
    Bloom.ANALYZING: "Breaking down or distinguishing the parts of learned information.",
    Bloom.EVALUATING: (
        "Making judgments about information, validity of ideas, or quality of "
        "work based on a set of criteria."
    ),
    Bloom.CREATING: "Using information to generate new ideas or products.",
}

BLOOM_CLASSIFY_PROMPT = """Classify the questions into one of the six main categories of Bloom's
Taxonomy based on the cognitive processes required for answering it correctly.

Bloom's Taxonomy Categories:
1. Remembering: {remembering}
2. Understanding: {understanding}
3. Applying: {applying}
4. Analyzing: {analyzing}
5. Evaluating: {evaluating}
6. Creating: {creating}

{questions}

Provide only the Bloom category and format your response in JSON with the
following structure:
{{
    "bloom_categories": [
        {{
            "question": question,
            "bloom_category": bloom_category
        }}
    ]
}}"""

ALIGNMENT_PROMPT = """You are mapping exam questions to the sections of a chapter that are
relevant for answering them.

Sections:
{sections}

Exam questions:
{questions}

For each exam question, list the indices of the sections needed to answer
it. Use an empty list when no section is relevant.

Output in the following JSON format:
{{
    "alignments": [
        {{"question": 1, "sections": [1, 2]}},
        ...
    ]
}}"""

SALIENCE_PROMPT = """Article: {article}
Question: {question}

System Instructions
Imagine you are a curious reader going through the article. You come across
a question and need to determine whether it should be answered within the
article or not. Your task is to assign a score based on the relevance and
necessity of answering the question.

Scoring Criteria
- Score = 1: The question is completely unrelated to the article.
- Score = 2: The question is related but already answered in the article.
- Score = 3: The question is related but answering it is not essential, as it expands on a minor or non-central idea.
- Score = 4: The question is related and answering it enhances the reader's understanding of the article.
- Score = 5: The question is related and must be answered, as it expands on central ideas of the article.

Scoring Guidelines
- The score is based on the information utility of the answer.
- If a question is related but not central or necessary, do NOT assign it a high score.
- Assign Score 3 if the question is unanswered but not critical, and Score 2 if it has already been answered.
- Distinguishing Scores 4 and 5:
  - If the article would feel incomplete without the answer, assign Score 5.
  - Otherwise, assign Score 4.
- A Score of 4 is useful, but other questions may be more important.
- A Score of 5 is reserved for must-answer, central questions.
- Avoid bias toward high scores and carefully follow the instructions.

The score should strictly be an integer between 1 and 5.

Score:"""

ENTROPY_PRIOR_PROMPT = """Imagine you are a reader encountering a question in the article.

Article: {article}

Question: {question}

Answer:"""

ENTROPY_POSTERIOR_PROMPT = """Imagine you are a reader encountering a question in the article.

Article: {article}

Question: {question}

Answer: {first_token}"""

NEXT_PARAGRAPH_PROMPT = """Use the cognitive process of {level}: {definition}
to generate the next paragraph for the following
text that will help the student understand the content better:

{context}

Output in the following JSON format:
{{
    "next_paragraph": next_paragraph
}}"""

BRIDGE_QUESTION_PROMPT = """Given the input context and the next paragraph,
what is the key question that connects the two?

Input context: {context}
Next paragraph: {next_paragraph}

Output in the following JSON format:
{{
    "question": question
}}"""

# Fallback sectioning exemplar, overridable per subject via config.
DEFAULT_SECTIONING_EXAMPLE_INPUT = """Learning Objectives
Describe what cells are made of.

Cells are the basic unit of life. Every organism is built from one or more
cells, and new cells arise from existing cells.

Inside each cell, organelles carry out specialized jobs. The nucleus stores
genetic material while mitochondria supply energy.

Summary
Cells are the unit of life and contain organelles."""

DEFAULT_SECTIONING_EXAMPLE_OUTPUT = """{
    "section": {
        "1": {
            "content": "Cells are the basic unit of life. Every organism is built from one or more cells, and new cells arise from existing cells."
        },
        "2": {
            "content": "Inside each cell, organelles carry out specialized jobs. The nucleus stores genetic material while mitochondria supply energy."
        }
    }
}"""


# -- renderers ---------------------------------------------------------------


def truncate_preceding(sections: Sequence[Section], budget_chars: int) -> list[Section]:
    """Drop oldest sections until the joined text fits the budget.

    The anchor is handled by the caller and is never truncated.
    """
    kept = list(sections)
    while kept and sum(len(s.content) + 2 for s in kept) > budget_chars:
        kept.pop(0)
    return kept


def render_article(preceding: Sequence[Section], budget_chars: int) -> str:
    return "\n\n".join(s.content for s in truncate_preceding(preceding, budget_chars))


def render_question_prompt(article: str, section: str) -> str:
    return QUESTION_PROMPT.format(article=article, section=section)


def render_cot_prompt(article: str, section: str) -> str:
    return COT_QUESTION_PROMPT.format(article=article, section=section)


def render_few_shot_prompt(
    exemplars: Sequence[tuple[str, str]], article: str, section: str
) -> str:
    blocks = [
        f"Section: {content}\nExam question: {question}" for content, question in exemplars
    ]
    prefix = FEW_SHOT_PREFIX.format(examples="\n\n".join(blocks))
    return prefix + QUESTION_PROMPT.format(article=article, section=section)


def render_answer_prompt(questions: Sequence[str]) -> str:
    return ANSWER_PROMPT.format(questions=json.dumps(list(questions), ensure_ascii=False))


def render_learning_materials(pairs: Iterable[QAPair]) -> str:
    return "\n\n".join(f"Q: {p.question}\nA: {p.answer}" for p in pairs)


def render_exam_block(questions: Sequence[ExamQuestion]) -> str:
    return "\n".join(f"{i}. {q.text}" for i, q in enumerate(questions, start=1))


def render_learner_prompt(pairs: Iterable[QAPair], questions: Sequence[ExamQuestion]) -> str:
    return LEARNER_PROMPT.format(
        learning_material=render_learning_materials(pairs),
        exam=render_exam_block(questions),
    )


def render_evaluator_prompt(
    document: str, question: str, reference_answer: str | None, prediction: str
) -> str:
    return EVALUATOR_PROMPT.format(
        document=document,
        question=question,
        answer=reference_answer if reference_answer is not None else "None",
        prediction=prediction,
    )


def render_sectioning_prompt(
    target_content: str,
    example_input: str = DEFAULT_SECTIONING_EXAMPLE_INPUT,
    example_output: str = DEFAULT_SECTIONING_EXAMPLE_OUTPUT,
) -> str:
    return SECTIONING_PROMPT.format(
        example_input=example_input,
        example_output=example_output,
        target_content=target_content,
    )


def render_bloom_classify_prompt(question_texts: Sequence[str]) -> str:
    lines = "\n".join(f"Question {i}: {t}" for i, t in enumerate(question_texts, start=1))
    return BLOOM_CLASSIFY_PROMPT.format(
        remembering=BLOOM_DEFINITIONS[Bloom.REMEMBERING],
        understanding=BLOOM_DEFINITIONS[Bloom.UNDERSTANDING],
        applying=BLOOM_DEFINITIONS[Bloom.APPLYING],
        analyzing=BLOOM_DEFINITIONS[Bloom.ANALYZING],
        evaluating=BLOOM_DEFINITIONS[Bloom.EVALUATING],
        creating=BLOOM_DEFINITIONS[Bloom.CREATING],
        questions=lines,
    )


def render_alignment_prompt(
    sections: Sequence[Section], questions: Sequence[ExamQuestion]
) -> str:
    section_lines = "\n".join(f"[{s.index}] {s.content}" for s in sections)
    question_lines = "\n".join(f"[{i}] {q.text}" for i, q in enumerate(questions, start=1))
    return ALIGNMENT_PROMPT.format(sections=section_lines, questions=question_lines)


def render_salience_prompt(article: str, question: str) -> str:
    return SALIENCE_PROMPT.format(article=article, question=question)


def render_entropy_prior_prompt(article: str, question: str) -> str:
    return ENTROPY_PRIOR_PROMPT.format(article=article, question=question)


def render_entropy_posterior_prompt(article: str, question: str, first_token: str) -> str:
    return ENTROPY_POSTERIOR_PROMPT.format(
        article=article, question=question, first_token=first_token
    )


def render_next_paragraph_prompt(level: Bloom, context: str) -> str:
    return NEXT_PARAGRAPH_PROMPT.format(
        level=level.value, definition=BLOOM_DEFINITIONS[level], context=context
    )


def render_bridge_question_prompt(context: str, next_paragraph: str) -> str:
    return BRIDGE_QUESTION_PROMPT.format(context=context, next_paragraph=next_paragraph)
