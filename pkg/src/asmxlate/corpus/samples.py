"""Paired assembly/source samples and their JSONL file format."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable


class Task(str, enum.Enum):
    ASM2SRC = "asm2src"
    SRC2ASM = "src2asm"

    @property
    def input_is_asm(self) -> bool:
        return self is Task.ASM2SRC


class CorpusError(ValueError):
    """Raised for unreadable or malformed corpus files."""


@dataclass(frozen=True)
class Sample:
    input_text: str
    output_text: str
    task: Task
    id: str = ""

    def __post_init__(self):
        if not self.input_text or not self.output_text:
            raise ValueError(f"sample {self.id!r}: input and output must be non-empty")

    @property
    def asm(self) -> str:
        return self.input_text if self.task.input_is_asm else self.output_text

    @property
    def src(self) -> str:
        return self.output_text if self.task.input_is_asm else self.input_text

    @classmethod
    def from_pair(cls, src: str, asm: str, task: Task | str, id: str = "") -> "Sample":
        task = Task(task)
        if task.input_is_asm:
            return cls(asm, src, task, id)
        return cls(src, asm, task, id)

    def to_record(self) -> dict:
        rec = {"src": self.src, "asm": self.asm, "task": self.task.value}
        if self.id:
            rec["id"] = self.id
        return rec


def parse_records(lines: Iterable[str], origin: str = "<input>") -> list[Sample]:
    samples = []
    problems = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"{origin}:{lineno}: malformed JSON ({exc.msg})")
            continue
        if not isinstance(rec, dict):
            problems.append(f"{origin}:{lineno}: expected a JSON object")
            continue
        missing = [k for k in ("src", "asm", "task") if k not in rec]
        if missing:
            problems.append(f"{origin}:{lineno}: missing keys {missing}")
            continue
        try:
            task = Task(rec["task"])
        except ValueError:
            problems.append(f"{origin}:{lineno}: unknown task {rec['task']!r}")
            continue
        if not isinstance(rec["src"], str) or not isinstance(rec["asm"], str):
            problems.append(f"{origin}:{lineno}: 'src' and 'asm' must be strings")
            continue
        try:
            samples.append(Sample.from_pair(rec["src"], rec["asm"], task, str(rec.get("id", ""))))
        except ValueError as exc:
            problems.append(f"{origin}:{lineno}: {exc}")
    if problems:
        raise CorpusError("\n".join(problems))
    return samples


def ingest_jsonl(path: str | Path) -> list[Sample]:
    """Read a corpus file; every malformed line is reported with its line number."""
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"corpus file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        return parse_records(fh, origin=str(path))


def dumps_jsonl(samples: Iterable[Sample]) -> str:
    return "".join(json.dumps(s.to_record(), ensure_ascii=False, sort_keys=True) + "\n" for s in samples)


def write_jsonl(samples: Iterable[Sample], path: str | Path) -> None:
    Path(path).write_text(dumps_jsonl(samples), encoding="utf-8")
