"""Atomic file writes and JSON-lines helpers."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Union

PathLike = Union[str, os.PathLike]


def atomic_write(path: PathLike, data: bytes) -> Path:
    """Write ``data`` to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dumps_line(record: dict) -> str:
    return json.dumps(record, sort_keys=False, separators=(", ", ": ")) + "\n"


def write_jsonl(path: PathLike, records: Iterable[dict]) -> Path:
    return atomic_write(path, "".join(dumps_line(r) for r in records).encode("utf-8"))


def read_jsonl(path: PathLike) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
