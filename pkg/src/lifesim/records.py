"""Line-delimited JSON helpers shared by every on-disk artifact."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Iterator


class RecordError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = f"{source or '<stream>'}:{line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.source = source


def dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=False, separators=(", ", ": "))


def iter_lines(source) -> Iterator[tuple[int, str]]:
    """Yield (line number, text) from a path or an iterable of lines."""
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            yield from ((i, line.rstrip("\n")) for i, line in enumerate(fh, 1))
    else:
        yield from ((i, line.rstrip("\n")) for i, line in enumerate(source, 1))


def read_jsonl(source) -> Iterator[tuple[int, dict]]:
    name = str(source) if isinstance(source, (str, Path)) else None
    for i, line in iter_lines(source):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise RecordError(f"malformed record: {e.msg}", i, name) from None
        if not isinstance(obj, dict):
            raise RecordError("record is not an object", i, name)
        yield i, obj


def write_jsonl(path, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps(rec) + "\n")
    return path


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return path


def file_hash(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    if p.is_dir():
        for child in sorted(q for q in p.rglob("*") if q.is_file()):
            h.update(str(child.relative_to(p)).encode())
            h.update(child.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()
