"""Report rendering: delimited tables plus matplotlib figures on disk.

Figures use the Agg backend so reports render in headless environments.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .domain import Bloom, Chapter, Split

logger = logging.getLogger(__name__)


def format_gain_cell(score: float, baseline: float) -> str:
    """Render a score with its gain over the no-study baseline, e.g.
    ``0.76 (+0.30)``."""
    return f"{score:.2f} ({score - baseline:+.2f})"


def write_scores_table(scores: Mapping[str, Any], out_dir: Path) -> list[Path]:
    """Exam-score table: one row per subject, score with gain over no-study."""
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "exam_scores.csv"
    txt_path = out_dir / "exam_scores.txt"
    subjects = scores.get("subjects", [])
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "no_study", "score", "gain", "cell"])
        for row in subjects:
            writer.writerow(
                [
                    row["subject"],
                    f"{row['no_study']:.4f}",
                    f"{row['score']:.4f}",
                    f"{row['gain']:+.4f}",
                    row["cell"],
                ]
            )
    strategy = scores.get("strategy", "?")
    lines = [f"End-of-chapter exam scores ({strategy})", ""]
    width = max([len("Subject")] + [len(r["subject"]) for r in subjects], default=8)
    lines.append(f"{'Subject':<{width}}  {'No-study':>9}  {'Score (gain)':>14}")
    for row in subjects:
        lines.append(
            f"{row['subject']:<{width}}  {row['no_study']:>9.2f}  {row['cell']:>14}"
        )
    txt_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return [csv_path, txt_path]


def write_correlations_csv(correlations: Sequence[Mapping[str, Any]], out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "correlations.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric1", "metric2", "rho", "p_value", "n"])
        for row in correlations:
            writer.writerow(
                [
                    row["metric1"],
                    row["metric2"],
                    f"{row['rho']:.4f}",
                    f"{row['p_value']:.4g}",
                    row["n"],
                ]
            )
    return path


def plot_bloom_distribution(chapters: Iterable[Chapter], out_path: Path) -> Path:
    """Per-subject histogram of exam-question cognitive categories."""
    counts: dict[str, Counter] = {}
    for chapter in chapters:
        subject_counts = counts.setdefault(chapter.subject, Counter())
        for question in chapter.exam.questions:
            if question.bloom is not None:
                subject_counts[question.bloom.value] += 1
    subjects = sorted(counts)
    categories = [b.value for b in Bloom]
    fig, ax = plt.subplots(figsize=(9, 4.5))
    width = 0.8 / max(len(subjects), 1)
    for i, subject in enumerate(subjects):
        values = [counts[subject].get(cat, 0) for cat in categories]
        positions = [x + i * width for x in range(len(categories))]
        ax.bar(positions, values, width=width, label=subject)
    ax.set_xticks([x + 0.4 - width / 2 for x in range(len(categories))])
    ax.set_xticklabels(categories, rotation=20, ha="right")
    ax.set_ylabel("Exam questions")
    ax.set_title("Cognitive-level distribution of exam questions")
    if subjects:
        ax.legend(fontsize=8)
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_theta_sweep(rows: Sequence[Mapping[str, Any]], out_path: Path) -> Path:
    """Accepted training examples as a function of the utility threshold."""
    thetas = [float(r["theta"]) for r in rows]
    sizes = [int(r["accepted_count"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(thetas, sizes, marker="o")
    ax.set_xlabel("Utility threshold")
    ax.set_ylabel("Accepted examples")
    ax.set_title("Dataset size vs. utility threshold")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_utility_histogram(utilities: Sequence[float], out_path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(utilities, bins=20, range=(-1.0, 1.0), edgecolor="black", alpha=0.8)
    ax.set_xlabel("Utility")
    ax.set_ylabel("QA pairs")
    ax.set_title("Distribution of estimated question utility")
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
