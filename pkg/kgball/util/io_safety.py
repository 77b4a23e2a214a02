from __future__ import annotations

import os
import tempfile
from pathlib import Path


def ensure_parent_dir(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write ``payload`` to a sibling temp file, fsync it, then rename it over ``path``.

    Readers see either the previous file or the complete new one.
    """
    ensure_parent_dir(path)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as tmp:
            tmp.write(payload)
            tmp.flush()
            os.fsync(tmp.fileno())
        os.replace(tmp_name, path)
    finally:
        if os.path.exists(tmp_name):
            try:
                os.remove(tmp_name)
            except OSError:
                pass


def atomic_write_text(path: Path, content: str) -> None:
    atomic_write_bytes(path, content.encode("utf-8"))


def append_line(path: Path, line: str, header: str | None = None) -> None:
    """Append one line, writing ``header`` first when the file does not exist yet."""
    ensure_parent_dir(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with path.open("a", encoding="utf-8", newline="\n") as fh:
        if fresh and header is not None:
            fh.write(header + "\n")
        fh.write(line + "\n")
        fh.flush()
