"""Line-delimited stage files: one JSON object per line, atomic writes.

persist_stage/load_stage are exact inverses for any record type exposing
to_dict/from_dict. Writes go to a temp file in the same directory and are
renamed into place, so a killed run never leaves a partial stage file.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, TypeVar

from .records import SCHEMA_VERSION


class VersionMismatchError(RuntimeError):
    def __init__(self, path: Path, found: Any):
        self.path = path
        self.found = found
        super().__init__(
            f"{path}: schema_version {found!r} not readable by tool schema {SCHEMA_VERSION}"
        )


class Serializable(Protocol):
    def to_dict(self) -> dict[str, Any]: ...


R = TypeVar("R")


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def dump_json_line(payload: dict[str, Any]) -> str:
    return json.dumps(payload, sort_keys=True, ensure_ascii=False)


def persist_stage(records: Iterable[Serializable], path: Path | str) -> int:
    """Write records as UTF-8 JSONL, one newline-terminated object per line.

    Returns the number of lines written (recorded into the run manifest).
    """
    path = Path(path)
    lines = [dump_json_line(r.to_dict()) for r in records]
    body = "".join(line + "\n" for line in lines)
    atomic_write_text(path, body)
    return len(lines)


def load_stage(path: Path | str, from_dict: Callable[[dict[str, Any]], R]) -> list[R]:
    """Read a stage file back into records; exact inverse of persist_stage."""
    path = Path(path)
    records: list[R] = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            data = json.loads(line)
            version = data.get("schema_version")
            if version != SCHEMA_VERSION:
                raise VersionMismatchError(path, version)
            records.append(from_dict(data))
    return records


def read_json(path: Path | str) -> Any:
    return json.loads(Path(path).read_text("utf-8"))


def write_json(path: Path | str, payload: Any) -> None:
    atomic_write_text(Path(path), json.dumps(payload, indent=2, sort_keys=True) + "\n")
