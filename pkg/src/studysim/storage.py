"""Small deterministic readers/writers for stage artifacts."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Sequence

from .domain import Chapter, chapter_from_dict, chapter_to_dict


def write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    return path


def read_json(path: Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_jsonl(path: Path, rows: Iterable[Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    return path


def read_jsonl(path: Path) -> list[Any]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def save_chapters(directory: Path, chapters: Sequence[Chapter]) -> Path:
    for chapter in chapters:
        write_json(
            directory / chapter.subject / f"{chapter.ordinal:03d}.json",
            chapter_to_dict(chapter),
        )
    return directory


def load_chapters(directory: Path) -> list[Chapter]:
    chapters = [
        chapter_from_dict(read_json(path)) for path in sorted(Path(directory).rglob("*.json"))
    ]
    return sorted(chapters, key=lambda c: (c.subject, c.ordinal))
